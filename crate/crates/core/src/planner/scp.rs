//! Sequential convex loop shared by the optimizing planners. Each
//! subproblem linearizes the dynamics about the current reference, keeps
//! clearance through affine rows frozen at the horizon-start reference, and
//! models occlusion either with the cone surrogate or the smooth proxy. A
//! candidate is accepted only if the merged objective, evaluated on the
//! exact rollout, does not increase; otherwise the trust region shrinks.

use std::time::Instant;

use crate::collision::{linearized_collision_constraints, reference_duals, DualPair};
use crate::convexprog::{self, ConicProgram, LinExpr, SolveStatus};
use crate::dynamics::{linearize, rollout, unwrapped_headings, wrap_angle, Control, State, Trajectory};
use crate::error::Result;
use crate::geometry::{cross, exact_distance, perp, rotation, OcclusionGeom, Point2, Vector2, GEOM_TOL};
use crate::occlusion::{between, build_occlusion_constraints, draw_samples, occlusion_probability, OcclusionConstraintSet, SampleSet};

use super::{tracking_cost, Diagnostics, OcclusionMethod, OcclusionSlack, PlanResult, PlanStatus, PlannerConfig, SlackMode, Waypoints, World};

/// Floor on the speed used for linearization. At zero speed the steering
/// column vanishes and a stopped reference could never turn.
const LINEARIZATION_SPEED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Croa,
    Ompc,
    Tracking,
}

pub fn plan_croa(world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    optimize(Variant::Croa, world, warm, cfg)
}

pub fn plan_ompc(world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    optimize(Variant::Ompc, world, warm, cfg)
}

/// Tracking plus polytope clearance; all occlusion terms removed.
pub fn plan_tracking(world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    let cfg = PlannerConfig {
        penalty_occlusion: 0.0,
        samples: 0,
        ..cfg.clone()
    };
    optimize(Variant::Tracking, world, warm, &cfg)
}

/// Slack values minimizing the occlusion cost at terminal position `p`,
/// and that cost.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionCost {
    pub slack: OcclusionSlack,
    /// Per-sample sum of hinge residuals, m^2.
    pub hinge: Vec<f64>,
    pub value: f64,
}

/// Minimizes `sigma·[xi-1]+ + sigma_h·sum_k [c_k/xi - l_k]+` over
/// `xi in [floor, cap]`. The function is convex and piecewise smooth, so
/// the minimum sits at a breakpoint or at the stationary point of a piece.
pub fn best_xi(c: &[f64], l: &[f64], sigma: f64, sigma_h: f64, floor: f64, cap: f64) -> (f64, f64) {
    let phi = |xi: f64| {
        sigma * (xi - 1.0).max(0.0) + sigma_h * c.iter().zip(l).map(|(c, l)| (c / xi - l).max(0.0)).sum::<f64>()
    };
    let mut knots = vec![floor, cap];
    if (floor..=cap).contains(&1.0) {
        knots.push(1.0);
    }
    for (c, l) in c.iter().zip(l) {
        if *l > 0.0 {
            let x = c / l;
            if x > floor && x < cap {
                knots.push(x);
            }
        }
    }
    knots.sort_by(f64::total_cmp);
    let mut candidates = knots.clone();
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo < 1.0 || hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let active: f64 = c.iter().zip(l).filter(|(c, l)| *c / mid > **l).map(|(c, _)| c).sum();
        let x = if sigma > 0.0 { (sigma_h * active / sigma).sqrt() } else { hi };
        candidates.push(x.clamp(lo, hi));
    }
    let mut best = (cap, phi(cap));
    for x in candidates {
        let v = phi(x);
        if v < best.1 || (v == best.1 && x < best.0) {
            best = (x, v);
        }
    }
    best
}

/// Exact occlusion cost at `p`: per sample, the slack `xi_i` minimizes
/// `sigma·w_i + sigma_h·hinge_i` with `w_i = [xi_i - 1]+` and the hinge
/// summing `[R²|p-g|²/(xi |o-g|²) - dist²]+` over the gating obstacles.
pub fn occlusion_slacks(p: &Point2, samples: &SampleSet, geoms: &[OcclusionGeom], cfg: &PlannerConfig) -> OcclusionCost {
    let m = samples.len();
    let mut xi = vec![cfg.xi_floor; m];
    let mut w = vec![0.0; m];
    let mut hinge = vec![0.0; m];
    let mut value = 0.0;
    let (mut c, mut l) = (Vec::new(), Vec::new());
    for (i, g) in samples.samples.iter().enumerate() {
        c.clear();
        l.clear();
        for geom in geoms {
            let a = geom.center - g;
            let a2 = a.norm_squared();
            if a2 < GEOM_TOL * GEOM_TOL || !between(p, g, &geom.center) {
                continue;
            }
            c.push(geom.radius * geom.radius * (p - g).norm_squared() / a2);
            l.push(cross(&a, &(p - g)).powi(2) / a2);
        }
        if c.is_empty() {
            continue;
        }
        let (x, _) = best_xi(&c, &l, cfg.penalty_occlusion, cfg.penalty_hinge, cfg.xi_floor, cfg.xi_cap);
        xi[i] = x;
        w[i] = (x - 1.0).max(0.0);
        hinge[i] = c.iter().zip(&l).map(|(c, l)| (c / x - l).max(0.0)).sum();
        value += samples.weights[i] * (cfg.penalty_occlusion * w[i] + cfg.penalty_hinge * hinge[i]);
    }
    OcclusionCost {
        slack: OcclusionSlack { xi, w },
        hinge,
        value,
    }
}

/// The occlusion part of one subproblem as a function of the terminal
/// position alone: sight-line terms linearized at the expansion point,
/// slacks minimized per sample. Convex, so it is handled by cuts.
struct OcclusionModel {
    set: OcclusionConstraintSet,
    fixed_xi: Option<Vec<f64>>,
}

impl OcclusionModel {
    fn eval(&self, p: &Point2, samples: &SampleSet, geoms: &[OcclusionGeom], cfg: &PlannerConfig) -> (f64, Vector2) {
        let (mut value, mut grad) = (0.0, Vector2::zeros());
        let cons = &self.set.constraints;
        let (mut c, mut l, mut dc, mut dl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        while start < cons.len() {
            let i = cons[start].sample_index;
            let mut end = start;
            c.clear();
            l.clear();
            dc.clear();
            dl.clear();
            while end < cons.len() && cons[end].sample_index == i {
                let con = &cons[end];
                let a2 = (geoms[con.obstacle_index].center - con.sample).norm_squared();
                let r2 = con.radius * con.radius / a2;
                let d = p - con.sample;
                c.push(r2 * d.norm_squared());
                dc.push(d * (2.0 * r2));
                l.push(-con.theta_affine.eval(p) / a2);
                dl.push(-con.theta_affine.gradient / a2);
                end += 1;
            }
            let xi = match &self.fixed_xi {
                Some(x) => x[i],
                None => best_xi(&c, &l, cfg.penalty_occlusion, cfg.penalty_hinge, cfg.xi_floor, cfg.xi_cap).0,
            };
            let q = samples.weights[i];
            value += q * cfg.penalty_occlusion * (xi - 1.0).max(0.0);
            for k in 0..c.len() {
                let h = c[k] / xi - l[k];
                if h > 0.0 {
                    value += q * cfg.penalty_hinge * h;
                    grad += (dc[k] / xi - dl[k]) * (q * cfg.penalty_hinge);
                }
            }
            start = end;
        }
        (value, grad)
    }
}

/// Smooth occlusion proxy `sum_k exp(-dist^2 / (2 R_k^2))` over obstacles
/// between `p` and `mean`, with its gradient in `p`.
pub fn ompc_proxy(p: &Point2, mean: &Point2, geoms: &[OcclusionGeom]) -> (f64, Vector2) {
    let mut value = 0.0;
    let mut grad = Vector2::zeros();
    for geom in geoms {
        let a = geom.center - mean;
        let a2 = a.norm_squared();
        if a2 < GEOM_TOL * GEOM_TOL || !between(p, mean, &geom.center) {
            continue;
        }
        let c = cross(&a, &(p - mean));
        let s2 = 2.0 * geom.radius * geom.radius;
        let f = (-(c * c / a2) / s2).exp();
        value += f;
        grad += perp(&a) * (-f / s2 * 2.0 * c / a2);
    }
    (value, grad)
}

/// Clearance along a fixed direction `a` at step `h`, one row per body
/// point `c` (world offset at the row heading):
/// `a·p + a·c + (a·perp c)·δ - |a||c|/2·σ + b >= 0`, where `δ` is the
/// heading change from the row heading and `σ >= δ²`. The quadratic term
/// bounds the rotation remainder, so the rows stay valid for any heading.
#[derive(Debug, Clone)]
struct ClearanceRow {
    step: usize,
    a: Vector2,
    b: f64,
    offsets: Vec<Vector2>,
}

enum OcclusionStep {
    None,
    Cones {
        set: OcclusionConstraintSet,
        fixed_xi: Option<Vec<f64>>,
        expansion: Point2,
    },
    Cuts(OcclusionModel),
    Proxy { gradient: Vector2 },
}

/// Largest clearance shortfall of the next executed state still counted as
/// safe. Speed is commanded directly, so a plan only has to keep its first
/// step clear; the rest of the horizon is priced in J.
const SAFE_DEFICIT: f64 = 0.04;

struct Eval {
    j: f64,
    safe: bool,
}

impl Eval {
    /// Safe plans beat unsafe ones, then lower J wins.
    fn beats(&self, other: &Eval) -> bool {
        if self.safe != other.safe {
            return self.safe;
        }
        self.j < other.j
    }
}

struct Ctx<'a, 'w> {
    variant: Variant,
    world: &'a World<'w>,
    cfg: &'a PlannerConfig,
    wp: Waypoints,
    samples: SampleSet,
    /// One circumdisc per obstacle, the OMPC body and occluder model.
    discs: Vec<OcclusionGeom>,
    disc_radius: Vec<f64>,
    body_centroid: Vector2,
}

impl Ctx<'_, '_> {
    fn evaluate(&self, traj: &Trajectory) -> Eval {
        let cfg = self.cfg;
        let track = tracking_cost(&traj.states, &self.wp, cfg.rho);
        let terminal = traj.terminal().position();
        let occl = match self.variant {
            Variant::Croa if !self.samples.is_empty() => occlusion_slacks(&terminal, &self.samples, self.world.geoms, cfg).value,
            Variant::Ompc => cfg.penalty_occlusion * ompc_proxy(&terminal, &self.world.target.mean, &self.discs).0,
            _ => 0.0,
        };
        let mut violation = escape_deficit(traj.terminal(), self.world, cfg);
        let mut first: f64 = 0.0;
        for (i, s) in traj.states[1..].iter().enumerate() {
            match self.variant {
                Variant::Ompc => {
                    let c = s.position() + rotation(s.heading) * self.body_centroid;
                    for (geom, r) in self.discs.iter().zip(&self.disc_radius) {
                        let d = (r - (c - geom.center).norm()).max(0.0);
                        violation += d;
                        if i == 0 {
                            first = first.max(d);
                        }
                    }
                }
                _ => {
                    let body = self.world.ego.at(s);
                    for obs in self.world.obstacles {
                        let d = (cfg.d0 - exact_distance(&body, obs)).max(0.0);
                        violation += d;
                        if i == 0 {
                            first = first.max(d);
                        }
                    }
                }
            }
        }
        Eval {
            j: occl + track + cfg.penalty_collision_slack * violation,
            safe: first <= SAFE_DEFICIT,
        }
    }
}

/// Arcs tried from the terminal state, as fractions of the steering limit.
const ESCAPE_STEERS: [f64; 5] = [0.0, 0.5, -0.5, 1.0, -1.0];
const ESCAPE_SPEED: f64 = 2.0;

/// Clearance deficit along the best of a few slow arcs leaving `s`. Zero
/// unless every arc runs into an obstacle, which is what a forward-only
/// vehicle parked nose-in against an obstacle looks like.
fn escape_deficit(s: &State, world: &World<'_>, cfg: &PlannerConfig) -> f64 {
    let mut best = f64::INFINITY;
    for frac in ESCAPE_STEERS {
        let u = cfg.bounds.clip(Control::new(ESCAPE_SPEED, frac * cfg.bounds.max.steer));
        let arc = rollout(s, &vec![u; cfg.horizon], cfg.dt, cfg.wheelbase);
        let mut deficit = 0.0;
        for st in &arc.states[1..] {
            let body = world.ego.at(st);
            for obs in world.obstacles {
                deficit += (cfg.d0 - exact_distance(&body, obs)).max(0.0);
            }
            if deficit >= best {
                break;
            }
        }
        best = best.min(deficit);
        if best == 0.0 {
            break;
        }
    }
    best
}

fn initial_reference(world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Trajectory {
    let h = cfg.horizon;
    let controls: Vec<Control> = match warm {
        Some(prev) if !prev.trajectory.controls.is_empty() => {
            let c = &prev.trajectory.controls;
            let last = *c.last().unwrap();
            (0..h).map(|i| cfg.bounds.clip(*c.get(i + 1).unwrap_or(&last))).collect()
        }
        _ => vec![Control::STOP; h],
    };
    rollout(&world.robot, &controls, cfg.dt, cfg.wheelbase)
}

/// Constant-steer arcs and lane changes at full and half nominal speed.
/// Their duals can point sideways where the shifted plan's cannot, which
/// lets the planner leave a pocket behind an obstacle face.
fn primitives(world: &World<'_>, cfg: &PlannerConfig) -> Vec<Trajectory> {
    let h = cfg.horizon;
    let mut out = Vec::new();
    for v in [cfg.nominal_speed, 0.5 * cfg.nominal_speed] {
        for steer in [0.0, 0.15, -0.15, 0.3, -0.3] {
            out.push(vec![Control::new(v, steer); h]);
        }
        for steer in [0.2, -0.2] {
            let q = h.div_ceil(3);
            out.push((0..h).map(|i| Control::new(v, if i < q { steer } else if i < 2 * q { -steer } else { 0.0 })).collect());
        }
    }
    out.into_iter()
        .map(|c| {
            let c: Vec<Control> = c.into_iter().map(|u| cfg.bounds.clip(u)).collect();
            rollout(&world.robot, &c, cfg.dt, cfg.wheelbase)
        })
        .collect()
}

fn near(angle: f64, anchor: f64) -> f64 {
    anchor + wrap_angle(angle - anchor)
}

struct Assembled {
    program: ConicProgram,
    n_states: usize,
    e0: usize,
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    ctx: &Ctx<'_, '_>,
    reference: &Trajectory,
    ref_heads: &[f64],
    row_heads: &[f64],
    rows: &[ClearanceRow],
    occl: &OcclusionStep,
    trust: (f64, f64),
) -> Assembled {
    let cfg = ctx.cfg;
    let h_len = cfg.horizon;
    let n_states = 3 * (h_len + 1);
    let n_ctrl = 2 * h_len;
    let sig0 = n_states + n_ctrl;
    let e0 = sig0 + h_len;
    let mut prog = ConicProgram::new(e0 + rows.len());
    let sx = |h: usize, j: usize| 3 * h + j;
    let ux = |h: usize, j: usize| n_states + 2 * h + j;

    let s0 = &ctx.world.robot;
    for (j, v) in [s0.x, s0.y, ref_heads[0]].into_iter().enumerate() {
        prog.add_eq(LinExpr::var(sx(0, j)).plus(-v));
    }
    for h in 0..h_len {
        let s = &reference.states[h];
        let lin = linearize(
            &State {
                x: s.x,
                y: s.y,
                heading: ref_heads[h],
            },
            &Control::new(reference.controls[h].speed.max(LINEARIZATION_SPEED), reference.controls[h].steer),
            cfg.dt,
            cfg.wheelbase,
        );
        for r in 0..3 {
            let mut e = LinExpr::var(sx(h + 1, r)).plus(-lin.c[r]);
            for j in 0..3 {
                e = e.term(sx(h, j), -lin.a[(r, j)]);
            }
            for j in 0..2 {
                e = e.term(ux(h, j), -lin.b[(r, j)]);
            }
            prog.add_eq(e);
        }
        let u = &reference.controls[h];
        let b = &cfg.bounds;
        prog.add_bounds(ux(h, 0), b.min.speed.max(u.speed - trust.0), b.max.speed.min(u.speed + trust.0));
        prog.add_bounds(ux(h, 1), b.min.steer.max(u.steer - trust.1), b.max.steer.min(u.steer + trust.1));
    }
    for (h, w) in ctx.wp.iter().enumerate() {
        prog.add_square(&LinExpr::var(sx(h, 0)).plus(-w.x), cfg.rho);
        prog.add_square(&LinExpr::var(sx(h, 1)).plus(-w.y), cfg.rho);
        prog.add_square(&LinExpr::var(sx(h, 2)).plus(-near(w.heading, ref_heads[h])), cfg.rho);
    }
    // sigma_h >= (theta_h - row heading)^2
    for h in 1..=h_len {
        prog.add_rotated_cone(
            LinExpr::var(sig0 + h - 1),
            LinExpr::constant(1.0),
            vec![LinExpr::var(sx(h, 2)).plus(-row_heads[h])],
        );
    }
    for (r, row) in rows.iter().enumerate() {
        let e = e0 + r;
        prog.add_bounds(e, 0.0, f64::INFINITY);
        prog.add_linear_cost(e, cfg.penalty_collision_slack);
        for c in &row.offsets {
            prog.add_ge(
                LinExpr::var(e)
                    .term(sx(row.step, 0), row.a.x)
                    .term(sx(row.step, 1), row.a.y)
                    .term(sx(row.step, 2), row.a.dot(&perp(c)))
                    .term(sig0 + row.step - 1, -0.5 * row.a.norm() * c.norm())
                    .plus(row.b + row.a.dot(c) - row.a.dot(&perp(c)) * row_heads[row.step]),
            );
        }
    }

    let (px, py) = (sx(h_len, 0), sx(h_len, 1));
    match occl {
        OcclusionStep::None | OcclusionStep::Cuts(_) => {}
        OcclusionStep::Proxy { gradient } => {
            prog.add_linear_cost(px, cfg.penalty_occlusion * gradient.x);
            prog.add_linear_cost(py, cfg.penalty_occlusion * gradient.y);
        }
        OcclusionStep::Cones { set, fixed_xi, expansion } => {
            let weights = &ctx.samples.weights;
            let mut xi_var: Vec<Option<usize>> = vec![None; ctx.samples.len()];
            for con in &set.constraints {
                let i = con.sample_index;
                let o = ctx.world.geoms[con.obstacle_index].center;
                let a = o - con.sample;
                let d = cross(&a, &(*expansion - con.sample)).abs() / a.norm();
                let r = cfg.prune_radius;
                if d - r > con.radius * ((*expansion - con.sample).norm() + r) / a.norm() {
                    continue;
                }
                let u = match fixed_xi {
                    Some(xi) => LinExpr::constant(xi[i]),
                    None => {
                        let v = *xi_var[i].get_or_insert_with(|| {
                            let xv = prog.add_variable();
                            let wv = prog.add_variable();
                            prog.add_bounds(xv, cfg.xi_floor, cfg.xi_cap);
                            prog.add_bounds(wv, 0.0, f64::INFINITY);
                            prog.add_ge(LinExpr::var(wv).term(xv, -1.0).plus(1.0));
                            prog.add_linear_cost(wv, cfg.penalty_occlusion * weights[i]);
                            xv
                        });
                        LinExpr::var(v)
                    }
                };
                let a2 = (ctx.world.geoms[con.obstacle_index].center - con.sample).norm_squared();
                let th = &con.theta_affine;
                let mut v = LinExpr::constant(-th.offset / a2)
                    .term(px, -th.gradient.x / a2)
                    .term(py, -th.gradient.y / a2);
                if !cfg.hard_occlusion {
                    let s = prog.add_variable();
                    prog.add_bounds(s, 0.0, f64::INFINITY);
                    prog.add_linear_cost(s, cfg.penalty_hinge * weights[i]);
                    v = v.term(s, 1.0);
                }
                let k = con.radius / a2.sqrt();
                let w = vec![
                    LinExpr::var(px).scaled(k).plus(-k * con.sample.x),
                    LinExpr::var(py).scaled(k).plus(-k * con.sample.y),
                ];
                prog.add_rotated_cone(u, v, w);
            }
        }
    }
    Assembled {
        program: prog,
        n_states,
        e0,
    }
}

/// Cutting-plane rounds per subproblem and the relative gap that ends them.
const MAX_CUTS: usize = 40;
const CUT_GAP: f64 = 1e-4;

/// Solves one subproblem. With the occlusion model, the epigraph of the
/// model is refined by tangent cuts at each new terminal position until the
/// model and its outer approximation agree.
fn solve_step(ctx: &Ctx<'_, '_>, asm: &Assembled, occl: &OcclusionStep, start: &Point2) -> convexprog::Solution {
    let cfg = ctx.cfg;
    let OcclusionStep::Cuts(model) = occl else {
        return convexprog::solve(&asm.program, cfg.solver_tol, cfg.solver_max_iters);
    };
    let (px, py) = (asm.n_states - 3, asm.n_states - 2);
    let mut prog = asm.program.clone();
    let t = prog.add_variable();
    prog.add_bounds(t, 0.0, f64::INFINITY);
    prog.add_linear_cost(t, 1.0);
    let eval = |p: &Point2| model.eval(p, &ctx.samples, ctx.world.geoms, cfg);
    let mut p = *start;
    let (mut f, mut g) = eval(&p);
    loop {
        prog.add_ge(LinExpr::var(t).term(px, -g.x).term(py, -g.y).plus(g.dot(&p) - f));
        let sol = convexprog::solve(&prog, cfg.solver_tol, cfg.solver_max_iters);
        if sol.status != SolveStatus::Optimal {
            return sol;
        }
        p = Point2::new(sol.values[px], sol.values[py]);
        (f, g) = eval(&p);
        if f - sol.values[t] <= CUT_GAP * (1.0 + f) || prog.inequalities().len() > asm.program.inequalities().len() + MAX_CUTS {
            return sol;
        }
    }
}

fn clearance_rows(ctx: &Ctx<'_, '_>, dual_ref: &[State], duals: &[Vec<DualPair>]) -> Result<(Vec<ClearanceRow>, f64)> {
    let cfg = ctx.cfg;
    match ctx.variant {
        Variant::Ompc => {
            let mut rows = Vec::new();
            for (k, geom) in ctx.discs.iter().enumerate() {
                for (h, s) in dual_ref.iter().enumerate().skip(1) {
                    let offset = rotation(s.heading) * ctx.body_centroid;
                    let d = s.position() + offset - geom.center;
                    let n = if d.norm() > 1e-9 { d / d.norm() } else { Vector2::new(-1.0, 0.0) };
                    rows.push(ClearanceRow {
                        step: h,
                        a: n,
                        b: -n.dot(&geom.center) - ctx.disc_radius[k],
                        offsets: vec![offset],
                    });
                }
            }
            Ok((rows, 0.0))
        }
        _ => {
            // The dual rows certify the direction; the support along it is
            // taken from the obstacle vertices, never looser than the dual.
            let raw = linearized_collision_constraints(duals, dual_ref, ctx.world.ego, ctx.world.obstacles)?;
            let worst = raw.iter().map(|r| r.stationarity_residual).fold(0.0, f64::max);
            let rows = raw
                .into_iter()
                .filter(|r| r.step >= 1)
                .map(|r| {
                    let support = ctx.world.obstacles[r.obstacle]
                        .vertices()
                        .iter()
                        .map(|v| r.a.dot(v))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let rot = rotation(r.heading_ref);
                    ClearanceRow {
                        step: r.step,
                        a: r.a,
                        b: -support - cfg.d0,
                        offsets: ctx.world.ego.body.vertices().iter().map(|v| rot * v).collect(),
                    }
                })
                .collect();
            Ok((rows, worst))
        }
    }
}

fn optimize(variant: Variant, world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    let started = Instant::now();
    cfg.validate()?;
    let wp = super::reference_waypoints(&world.robot, &world.target.mean, cfg)?;
    let samples = if variant == Variant::Croa && cfg.samples > 0 {
        draw_samples(world.target, cfg.samples, cfg.seed.wrapping_add(world.frame), cfg.weight_mode)?
    } else {
        SampleSet::empty(cfg.seed)
    };
    let inradius = world.ego.body.inradius_about(&world.ego.body.centroid());
    let discs: Vec<OcclusionGeom> = world.obstacles.iter().map(OcclusionGeom::from_polytope).collect();
    let ctx = Ctx {
        variant,
        world,
        cfg,
        wp,
        samples,
        disc_radius: discs.iter().map(|g| g.radius + inradius + cfg.d0).collect(),
        discs,
        body_centroid: world.ego.body.centroid(),
    };

    // lowest merged objective wins; the shifted plan wins ties
    let mut reference = initial_reference(world, warm, cfg);
    let mut current = ctx.evaluate(&reference);
    for cand in primitives(world, cfg) {
        let e = ctx.evaluate(&cand);
        if e.beats(&current) {
            reference = cand;
            current = e;
        }
    }
    // stopping keeps a clear robot clear; it is a fallback, not a competitor
    if !current.safe {
        let stop = rollout(&world.robot, &vec![Control::STOP; cfg.horizon], cfg.dt, cfg.wheelbase);
        let e = ctx.evaluate(&stop);
        if e.safe {
            reference = stop;
            current = e;
        }
    }
    let dual_ref = reference.states.clone();
    let duals = match variant {
        Variant::Ompc => Vec::new(),
        _ => reference_duals(world.ego, &dual_ref, world.obstacles)?,
    };
    let (rows, max_residual) = clearance_rows(&ctx, &dual_ref, &duals)?;
    let dual_heads = unwrapped_headings(&dual_ref);

    let mut trace = vec![current.j];
    let mut trust = (cfg.trust_speed, cfg.trust_steer);
    let (mut iterations, mut accepted, mut failures) = (0, 0, 0);
    let mut max_slack = 0.0;

    for _ in 0..cfg.ccp_iters {
        let expansion = reference.terminal().position();
        let occl = match variant {
            Variant::Croa if !ctx.samples.is_empty() => {
                let set = build_occlusion_constraints(&expansion, &ctx.samples, world.geoms, cfg.xi_floor);
                let fixed_xi = match cfg.slack_mode {
                    SlackMode::Joint => None,
                    SlackMode::Alternating => Some(occlusion_slacks(&expansion, &ctx.samples, world.geoms, cfg).slack.xi),
                };
                if cfg.occlusion_method == OcclusionMethod::Cones || cfg.hard_occlusion {
                    OcclusionStep::Cones { set, fixed_xi, expansion }
                } else {
                    OcclusionStep::Cuts(OcclusionModel { set, fixed_xi })
                }
            }
            Variant::Ompc => OcclusionStep::Proxy {
                gradient: ompc_proxy(&expansion, &world.target.mean, &ctx.discs).1,
            },
            _ => OcclusionStep::None,
        };
        for _ in 0..cfg.alt_iters {
            iterations += 1;
            let ref_heads = unwrapped_headings(&reference.states);
            let row_heads: Vec<f64> = dual_heads.iter().zip(&ref_heads).map(|(d, r)| near(*d, *r)).collect();
            let asm = assemble(&ctx, &reference, &ref_heads, &row_heads, &rows, &occl, trust);
            let sol = solve_step(&ctx, &asm, &occl, &reference.terminal().position());
            if sol.status != SolveStatus::Optimal {
                failures += 1;
                trust = (trust.0 * 0.5, trust.1 * 0.5);
                trace.push(current.j);
                continue;
            }
            let controls: Vec<Control> = (0..cfg.horizon)
                .map(|h| {
                    let i = asm.n_states + 2 * h;
                    cfg.bounds.clip(Control::new(sol.values[i], sol.values[i + 1]))
                })
                .collect();
            let candidate = rollout(&world.robot, &controls, cfg.dt, cfg.wheelbase);
            let eval = ctx.evaluate(&candidate);
            // never trade a safe plan for an unsafe one
            if eval.j <= current.j && (eval.safe || !current.safe) {
                let decrease = current.j - eval.j;
                reference = candidate;
                current = eval;
                accepted += 1;
                max_slack = sol.values[asm.e0..asm.e0 + rows.len()].iter().fold(0.0, |m: f64, v| m.max(*v));
                trust = ((trust.0 * 1.5).min(cfg.trust_speed), (trust.1 * 1.5).min(cfg.trust_steer));
                trace.push(current.j);
                if decrease < 1e-4 {
                    break;
                }
            } else {
                trust = (trust.0 * 0.5, trust.1 * 0.5);
                trace.push(current.j);
            }
        }
    }

    let terminal = reference.terminal().position();
    let (slacks, occl_estimate) = if variant == Variant::Croa && !ctx.samples.is_empty() {
        (
            occlusion_slacks(&terminal, &ctx.samples, world.geoms, cfg).slack,
            occlusion_probability(&terminal, &ctx.samples, world.geoms),
        )
    } else {
        (OcclusionSlack::default(), 0.0)
    };
    Ok(PlanResult {
        trajectory: reference,
        slacks,
        occl_estimate,
        duals,
        diagnostics: Diagnostics {
            iterations,
            accepted_steps: accepted,
            solver_failures: failures,
            objective_trace: trace,
            solve_time: started.elapsed().as_secs_f64(),
            max_stationarity_residual: max_residual,
            max_collision_slack: max_slack,
            status: if failures > 0 { PlanStatus::SolverFailure } else { PlanStatus::Ok },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::EgoShape;
    use crate::geometry::ConvexPolytope;
    use crate::occlusion::{xi_tight, GaussianTarget};

    #[test]
    fn free_space_moves_toward_target() {
        let ego = EgoShape::default();
        let target = GaussianTarget::isotropic(Point2::new(40.0, 0.0), 1.0).unwrap();
        let world = World {
            robot: State::new(0.0, 0.0, 0.0),
            obstacles: &[],
            geoms: &[],
            target: &target,
            ego: &ego,
            frame: 0,
        };
        let cfg = PlannerConfig::default();
        let res = plan_croa(&world, None, &cfg).unwrap();
        assert!(res.trajectory.terminal().x > 5.0);
        assert_eq!(res.occl_estimate, 0.0);
        let t = &res.diagnostics.objective_trace;
        assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-6));
        assert!(res.trajectory.controls.iter().all(|u| cfg.bounds.contains(u)));
    }

    #[test]
    fn proxy_on_sight_line_is_one() {
        let geoms = [OcclusionGeom::new(Point2::new(5.0, 0.0), 1.0).unwrap()];
        let (v, g) = ompc_proxy(&Point2::zeros(), &Point2::new(10.0, 0.0), &geoms);
        assert!((v - 1.0).abs() < 1e-15);
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn slacks_match_tight_values() {
        let geoms = [OcclusionGeom::new(Point2::new(5.0, 0.3), 1.0).unwrap()];
        let samples = SampleSet {
            samples: vec![Point2::new(10.0, 0.0), Point2::new(-3.0, 0.0)],
            weights: vec![0.5, 0.5],
            seed: 0,
        };
        let cfg = PlannerConfig {
            xi_cap: 1e6,
            penalty_hinge: 1e9,
            ..Default::default()
        };
        let p = Point2::zeros();
        let c = occlusion_slacks(&p, &samples, &geoms, &cfg);
        let t = xi_tight(&p, &samples.samples[0], &geoms[0]).unwrap();
        assert!((c.slack.xi[0] - t).abs() < 1e-12);
        assert!((c.slack.w[0] - (t - 1.0)).abs() < 1e-12);
        assert!(c.hinge[0].abs() < 1e-9);
        assert_eq!(c.slack.w[1], 0.0);
    }

    #[test]
    fn obstacle_on_line_breaks_symmetry() {
        let ego = EgoShape::default();
        let obstacles = vec![ConvexPolytope::rectangle(Point2::new(24.0, 0.0), 4.6, 1.9, 0.0).unwrap()];
        let geoms: Vec<OcclusionGeom> = obstacles.iter().map(OcclusionGeom::from_polytope).collect();
        let target = GaussianTarget::isotropic(Point2::new(40.0, 0.0), 0.5).unwrap();
        let cfg = PlannerConfig::default();
        let world = World {
            robot: State::new(0.0, 0.0, 0.0),
            obstacles: &obstacles,
            geoms: &geoms,
            target: &target,
            ego: &ego,
            frame: 0,
        };
        let res = plan_croa(&world, None, &cfg).unwrap();
        let terminal = res.trajectory.terminal();
        assert!(terminal.y.abs() > 0.5);
        let samples = draw_samples(&target, cfg.samples, cfg.seed, cfg.weight_mode).unwrap();
        let on_line = occlusion_probability(&Point2::new(terminal.x, 0.0), &samples, &geoms);
        assert!(res.occl_estimate < on_line, "estimate {} vs {on_line}", res.occl_estimate);
    }

    #[test]
    fn blocked_robot_keeps_its_next_step_clear() {
        let ego = EgoShape::default();
        // wall 1.2 m ahead of the nose, target behind it
        let obstacles = vec![ConvexPolytope::rectangle(Point2::new(5.48, 0.0), 1.0, 20.0, 0.0).unwrap()];
        let geoms: Vec<OcclusionGeom> = obstacles.iter().map(OcclusionGeom::from_polytope).collect();
        let target = GaussianTarget::isotropic(Point2::new(30.0, 0.0), 1.0).unwrap();
        let cfg = PlannerConfig::default();
        let world = World {
            robot: State::new(0.0, 0.0, 0.0),
            obstacles: &obstacles,
            geoms: &geoms,
            target: &target,
            ego: &ego,
            frame: 0,
        };
        for plan in [plan_croa, plan_tracking] {
            let res = plan(&world, None, &cfg).unwrap();
            let next = &res.trajectory.states[1];
            let d = exact_distance(&ego.at(next), &obstacles[0]);
            assert!(d >= cfg.d0 - SAFE_DEFICIT, "next clearance {d}");
        }
    }
}
