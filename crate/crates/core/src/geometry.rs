//! Planar convex polytopes, exact distance, ray casting, and the sight-line
//! distance used by the occlusion model.
//!
//! A [`ConvexPolytope`] keeps both representations: the counter-clockwise
//! vertex loop and one outward unit normal per edge, with edge `i` running
//! from `vertices[i]` to `vertices[i + 1]`. Offsets are therefore metric:
//! `normals[i] · x - offsets[i]` is the signed distance of `x` to the edge line.

use nalgebra::Matrix2;

use crate::error::{Error, Result};

pub type Vector2 = nalgebra::Vector2<f64>;
pub type Point2 = Vector2;

/// Absolute tolerance for geometric predicates, in meters.
pub const GEOM_TOL: f64 = 1e-9;

pub fn rotation(heading: f64) -> Matrix2<f64> {
    let (s, c) = heading.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Counter-clockwise quarter turn.
#[inline]
pub fn perp(v: &Vector2) -> Vector2 {
    Vector2::new(-v.y, v.x)
}

#[inline]
pub fn cross(a: &Vector2, b: &Vector2) -> f64 {
    a.x * b.y - a.y * b.x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolytope {
    normals: Vec<Vector2>,
    offsets: Vec<f64>,
    vertices: Vec<Point2>,
}

impl ConvexPolytope {
    /// Convex hull of `points` in minimal halfspace form.
    pub fn from_vertices(points: &[Point2]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::DegenerateInput(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegenerateInput("non-finite coordinate".into()));
        }
        let hull = convex_hull(points);
        if hull.len() < 3 {
            return Err(Error::DegenerateInput("all points are collinear".into()));
        }
        let area = signed_area(&hull);
        let scale = hull
            .iter()
            .map(|v| v.norm())
            .fold(1.0_f64, f64::max);
        if area <= 1e-12 * scale * scale {
            return Err(Error::DegenerateInput("hull has zero area".into()));
        }
        Ok(Self::from_ccw_loop(hull))
    }

    /// Axis-aligned box centered at `center`, rotated by `heading`.
    pub fn rectangle(center: Point2, length: f64, width: f64, heading: f64) -> Result<Self> {
        let (hl, hw) = (0.5 * length, 0.5 * width);
        let r = rotation(heading);
        let corners: Vec<Point2> = [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
            .iter()
            .map(|&(x, y)| r * Vector2::new(x, y) + center)
            .collect();
        Self::from_vertices(&corners)
    }

    fn from_ccw_loop(vertices: Vec<Point2>) -> Self {
        let n = vertices.len();
        let mut normals = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n);
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let e = b - a;
            let normal = Vector2::new(e.y, -e.x) / e.norm();
            offsets.push(normal.dot(&a));
            normals.push(normal);
        }
        Self {
            normals,
            offsets,
            vertices,
        }
    }

    pub fn normals(&self) -> &[Vector2] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn face_count(&self) -> usize {
        self.normals.len()
    }

    pub fn edge(&self, i: usize) -> (Point2, Point2) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        let mut acc = Vector2::zeros();
        let mut twice_area = 0.0;
        let origin = self.vertices[0];
        for i in 0..n {
            let a = self.vertices[i] - origin;
            let b = self.vertices[(i + 1) % n] - origin;
            let c = cross(&a, &b);
            twice_area += c;
            acc += (a + b) * c;
        }
        origin + acc / (3.0 * twice_area)
    }

    pub fn contains(&self, p: &Point2, tol: f64) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, b)| n.dot(p) <= b + tol)
    }

    /// Largest signed halfspace violation, `max_i (n_i · p - b_i)`.
    pub fn max_violation(&self, p: &Point2) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| n.dot(p) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `R(heading) · self + translation`.
    pub fn transform(&self, heading: f64, translation: &Point2) -> Self {
        let r = rotation(heading);
        let normals: Vec<Vector2> = self.normals.iter().map(|n| r * n).collect();
        let offsets = normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| b + n.dot(translation))
            .collect();
        let vertices = self.vertices.iter().map(|v| r * v + translation).collect();
        Self {
            normals,
            offsets,
            vertices,
        }
    }

    pub fn translate(&self, delta: &Vector2) -> Self {
        self.transform(0.0, delta)
    }

    /// Checks the representation invariants and returns a description of the
    /// first one that fails.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.vertices.len();
        if n < 3 || self.normals.len() != n || self.offsets.len() != n {
            return Err(format!("inconsistent sizes ({n} vertices)"));
        }
        if self.area() <= 0.0 {
            return Err("non-positive area".into());
        }
        for (i, normal) in self.normals.iter().enumerate() {
            if (normal.norm() - 1.0).abs() > 1e-12 {
                return Err(format!("normal {i} is not unit length"));
            }
            let tight = self
                .vertices
                .iter()
                .filter(|v| (normal.dot(v) - self.offsets[i]).abs() <= GEOM_TOL.max(1e-12 * self.offsets[i].abs()))
                .count();
            if tight < 2 {
                return Err(format!("halfspace {i} is tight at {tight} vertices"));
            }
        }
        for (j, v) in self.vertices.iter().enumerate() {
            if self.max_violation(v) > GEOM_TOL {
                return Err(format!("vertex {j} violates a halfspace"));
            }
        }
        Ok(())
    }

    /// Largest vertex distance from the local origin.
    pub fn max_vertex_norm(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Radius of the largest disc centered at `center` contained in the polytope.
    pub fn inradius_about(&self, center: &Point2) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, b)| b - n.dot(center))
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }
}

fn signed_area(loop_: &[Point2]) -> f64 {
    let n = loop_.len();
    let mut twice = 0.0;
    for i in 0..n {
        twice += cross(&loop_[i], &loop_[(i + 1) % n]);
    }
    0.5 * twice
}

/// Andrew's monotone chain; collinear points are dropped.
fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (*a - *b).norm() <= GEOM_TOL);
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: &Point2, a: &Point2, b: &Point2| cross(&(a - o), &(b - o));
    let mut lower: Vec<Point2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && turn(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && turn(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Separating-axis test over both normal sets; touching counts as intersecting.
pub fn intersects(a: &ConvexPolytope, b: &ConvexPolytope) -> bool {
    let separated_by = |p: &ConvexPolytope, q: &ConvexPolytope| {
        p.normals.iter().zip(&p.offsets).any(|(n, off)| {
            q.vertices
                .iter()
                .map(|v| n.dot(v))
                .fold(f64::INFINITY, f64::min)
                > *off
        })
    };
    !(separated_by(a, b) || separated_by(b, a))
}

pub fn point_segment_distance(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Euclidean distance between two convex polytopes; zero when they intersect.
///
/// Brute force over vertex-edge pairs in both directions. For disjoint convex
/// polygons the closest pair always involves a vertex, so edge-edge pairs add
/// nothing beyond these.
pub fn exact_distance(a: &ConvexPolytope, b: &ConvexPolytope) -> f64 {
    if intersects(a, b) {
        return 0.0;
    }
    let one_way = |p: &ConvexPolytope, q: &ConvexPolytope| {
        let mut best = f64::INFINITY;
        for v in &p.vertices {
            for i in 0..q.face_count() {
                let (e0, e1) = q.edge(i);
                best = best.min(point_segment_distance(v, &e0, &e1));
            }
        }
        best
    };
    one_way(a, b).min(one_way(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub index: usize,
}

/// Entry parameter of the ray into one polytope (Cyrus-Beck clipping), or
/// `None` on a miss. An origin inside the polytope enters at zero.
pub fn ray_entry(origin: &Point2, direction: &Vector2, poly: &ConvexPolytope, max_range: f64) -> Option<f64> {
    let mut t_enter = 0.0_f64;
    let mut t_exit = max_range;
    for (n, b) in poly.normals.iter().zip(&poly.offsets) {
        let denom = n.dot(direction);
        let num = b - n.dot(origin);
        if denom.abs() < 1e-15 {
            if num < 0.0 {
                return None;
            }
        } else if denom < 0.0 {
            t_enter = t_enter.max(num / denom);
        } else {
            t_exit = t_exit.min(num / denom);
        }
        if t_enter > t_exit {
            return None;
        }
    }
    Some(t_enter)
}

/// Nearest polytope hit by the ray within `max_range`. Ties go to the lower index.
pub fn ray_cast(
    origin: &Point2,
    direction: &Vector2,
    polys: &[ConvexPolytope],
    max_range: f64,
) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (index, poly) in polys.iter().enumerate() {
        if let Some(t) = ray_entry(origin, direction, poly, max_range) {
            if best.is_none_or(|h| t < h.distance) {
                best = Some(RayHit { distance: t, index });
            }
        }
    }
    best
}

/// Largest distance from `center` to a vertex.
pub fn circumradius(poly: &ConvexPolytope, center: &Point2) -> f64 {
    poly.vertices
        .iter()
        .map(|v| (v - center).norm())
        .fold(0.0, f64::max)
}

/// Perpendicular distance from `p` to the infinite line through `z` and `o`.
pub fn point_to_sight_line_distance(p: &Point2, z: &Point2, o: &Point2) -> Result<f64> {
    let dir = o - z;
    let len = dir.norm();
    if len < GEOM_TOL {
        return Err(Error::DegenerateLine);
    }
    Ok(cross(&dir, &(p - z)).abs() / len)
}

/// Disc abstraction of an obstacle used by the occlusion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionGeom {
    pub center: Point2,
    pub radius: f64,
}

impl OcclusionGeom {
    pub fn new(center: Point2, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !center.x.is_finite() || !center.y.is_finite() {
            return Err(Error::DegenerateGeometry(format!(
                "occlusion disc needs a positive radius, got {radius}"
            )));
        }
        Ok(Self { center, radius })
    }

    /// Centroid and circumradius about it.
    pub fn from_polytope(poly: &ConvexPolytope) -> Self {
        let center = poly.centroid();
        Self {
            center,
            radius: circumradius(poly, &center),
        }
    }

    /// Discs whose union contains `poly`: the circumdisc for compact
    /// shapes, or one circumdisc per equal slab along the long axis of an
    /// elongated one. A car seen end-on casts a far narrower shadow than
    /// its single circumdisc does.
    pub fn cover(poly: &ConvexPolytope) -> Vec<Self> {
        let extent = |u: &Vector2| {
            poly.vertices()
                .iter()
                .map(|v| u.dot(v))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
        };
        let mut best: Option<(f64, Vector2, f64, f64)> = None;
        for i in 0..poly.face_count() {
            let (a, b) = poly.edge(i);
            let u = (b - a).normalize();
            let (lo, hi) = extent(&u);
            let (wlo, whi) = extent(&perp(&u));
            let ratio = (hi - lo) / (whi - wlo);
            if best.is_none_or(|(r, ..)| ratio > r + GEOM_TOL) {
                best = Some((ratio, u, lo, hi));
            }
        }
        let Some((ratio, u, lo, hi)) = best else {
            return vec![Self::from_polytope(poly)];
        };
        let n = ((ratio - 1e-6).ceil() as usize).clamp(1, MAX_COVER_DISCS);
        if n == 1 {
            return vec![Self::from_polytope(poly)];
        }
        let step = (hi - lo) / n as f64;
        (0..n)
            .map(|j| {
                let s0 = lo + j as f64 * step;
                let piece = clip(&clip(poly.vertices(), &u, s0 + step), &-u, -s0);
                let center = piece.iter().sum::<Point2>() / piece.len() as f64;
                let radius = piece.iter().map(|v| (v - center).norm()).fold(0.0, f64::max);
                Self { center, radius }
            })
            .collect()
    }
}

const MAX_COVER_DISCS: usize = 4;

/// Part of a convex polygon with `n·x <= c`.
fn clip(poly: &[Point2], n: &Vector2, c: f64) -> Vec<Point2> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (fa, fb) = (n.dot(&a) - c, n.dot(&b) - c);
        if fa <= 0.0 {
            out.push(a);
        }
        if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
            out.push(a + (b - a) * (fa / (fa - fb)));
        }
    }
    out
}

/// Occlusion discs for a set of obstacles, in obstacle order.
pub fn occlusion_discs(obstacles: &[ConvexPolytope]) -> Vec<OcclusionGeom> {
    obstacles.iter().flat_map(OcclusionGeom::cover).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_square() -> ConvexPolytope {
        ConvexPolytope::from_vertices(&[
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap()
    }

    fn has_normal(p: &ConvexPolytope, n: Vector2) -> bool {
        p.normals().iter().any(|m| (m - n).norm() < 1e-12)
    }

    #[test]
    fn square_has_axis_normals() {
        let sq = unit_square();
        assert_eq!(sq.face_count(), 4);
        for n in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            assert!(has_normal(&sq, Vector2::new(n.0, n.1)));
        }
        sq.check_invariants().unwrap();
        assert!((sq.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interior_and_collinear_points_are_dropped() {
        let p = ConvexPolytope::from_vertices(&[
            Point2::new(0.0, 0.0),
            Point2::new(0.5, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.5),
        ])
        .unwrap();
        assert_eq!(p, unit_square());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)];
        assert!(matches!(
            ConvexPolytope::from_vertices(&line),
            Err(Error::DegenerateInput(_))
        ));
        assert!(ConvexPolytope::from_vertices(&line[..2]).is_err());
    }

    #[test]
    fn quarter_rotation_maps_x_axis_to_y_axis() {
        let sq = unit_square().transform(FRAC_PI_2, &Point2::zeros());
        assert!(sq.vertices().iter().any(|v| (v - Point2::new(0.0, 1.0)).norm() < 1e-12));
        sq.check_invariants().unwrap();
        let same = unit_square().transform(0.0, &Point2::zeros());
        assert_eq!(same, unit_square());
    }

    #[test]
    fn square_distances() {
        let a = ConvexPolytope::rectangle(Point2::new(0.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        let b = ConvexPolytope::rectangle(Point2::new(4.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        assert!((exact_distance(&a, &b) - 3.0).abs() < 1e-12);
        let c = ConvexPolytope::rectangle(Point2::new(0.5, 0.3), 1.0, 1.0, 0.3).unwrap();
        assert_eq!(exact_distance(&a, &c), 0.0);
        let d = ConvexPolytope::rectangle(Point2::new(3.0, 3.0), 1.0, 1.0, PI / 4.0).unwrap();
        // a's corner (0.5, 0.5) faces d's edge on the line x + y = 6 - sqrt(1/2)
        let expect = (5.0 - 0.5_f64.sqrt()) / 2.0_f64.sqrt();
        assert!((exact_distance(&a, &d) - expect).abs() < 1e-9);
    }

    #[test]
    fn ray_hits_and_misses() {
        let sq = ConvexPolytope::from_vertices(&[
            Point2::new(2.0, -1.0),
            Point2::new(3.0, -1.0),
            Point2::new(3.0, 1.0),
            Point2::new(2.0, 1.0),
        ])
        .unwrap();
        let hit = ray_cast(&Point2::zeros(), &Vector2::new(1.0, 0.0), std::slice::from_ref(&sq), 10.0).unwrap();
        assert!((hit.distance - 2.0).abs() < 1e-12);
        assert_eq!(hit.index, 0);
        assert!(ray_cast(&Point2::zeros(), &Vector2::new(-1.0, 0.0), std::slice::from_ref(&sq), 10.0).is_none());
        assert!(ray_cast(&Point2::zeros(), &Vector2::new(1.0, 0.0), &[sq], 1.5).is_none());
    }

    #[test]
    fn nearest_of_two_polytopes_wins() {
        let far = ConvexPolytope::rectangle(Point2::new(10.0, 0.0), 1.0, 4.0, 0.0).unwrap();
        let near = ConvexPolytope::rectangle(Point2::new(5.0, 0.0), 1.0, 1.0, 0.0).unwrap();
        let hit = ray_cast(&Point2::zeros(), &Vector2::new(1.0, 0.0), &[far, near], 40.0).unwrap();
        assert_eq!(hit.index, 1);
        assert!((hit.distance - 4.5).abs() < 1e-12);
    }

    #[test]
    fn circumradius_examples() {
        let sq = unit_square();
        let c = sq.centroid();
        assert!((c - Point2::new(0.5, 0.5)).norm() < 1e-12);
        assert!((circumradius(&sq, &c) - 0.5_f64.sqrt()).abs() < 1e-12);
        let hex: Vec<Point2> = (0..6)
            .map(|k| {
                let a = k as f64 * PI / 3.0;
                Point2::new(a.cos(), a.sin())
            })
            .collect();
        let hex = ConvexPolytope::from_vertices(&hex).unwrap();
        let c = hex.centroid();
        assert!(c.norm() < 1e-12);
        assert!((circumradius(&hex, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sight_line_distance_examples() {
        let z = Point2::new(0.0, 0.0);
        let o = Point2::new(1.0, 0.0);
        assert_eq!(point_to_sight_line_distance(&Point2::new(7.0, 0.0), &z, &o).unwrap(), 0.0);
        let d = point_to_sight_line_distance(&Point2::new(0.5, 2.0), &z, &o).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
        assert!(matches!(
            point_to_sight_line_distance(&Point2::new(0.5, 2.0), &z, &z),
            Err(Error::DegenerateLine)
        ));
    }

    #[test]
    fn occlusion_geom_of_square() {
        let g = OcclusionGeom::from_polytope(&unit_square());
        assert!((g.radius - 0.5_f64.sqrt()).abs() < 1e-12);
        assert!(OcclusionGeom::new(Point2::zeros(), 0.0).is_err());
    }

    #[test]
    fn compact_shapes_keep_one_disc() {
        let sq = unit_square();
        assert_eq!(OcclusionGeom::cover(&sq), vec![OcclusionGeom::from_polytope(&sq)]);
    }

    #[test]
    fn car_cover_is_tighter_and_complete() {
        let car = ConvexPolytope::rectangle(Point2::new(3.0, -1.0), 4.6, 1.9, 0.7).unwrap();
        let discs = OcclusionGeom::cover(&car);
        assert_eq!(discs.len(), 3);
        let single = OcclusionGeom::from_polytope(&car);
        for d in &discs {
            assert!(car.contains(&d.center, 1e-9));
            assert!(d.radius < 0.5 * single.radius + 0.01);
        }
        let v = car.vertices();
        for i in 0..=20 {
            for j in 0..=20 {
                let (a, b) = (i as f64 / 20.0, j as f64 / 20.0);
                let p = v[0] + (v[1] - v[0]) * a + (v[3] - v[0]) * b;
                assert!(discs.iter().any(|d| (p - d.center).norm() <= d.radius + 1e-9));
            }
        }
    }
}
