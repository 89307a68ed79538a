//! Receding-horizon planners: the occlusion-aware planner and three
//! baselines (disc/proxy occlusion-aware, pure tracking, path following).

mod pathfollow;
mod scp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::collision::{DualPair, EgoShape};
use crate::dynamics::{wrap_angle, ControlBounds, State, Trajectory, DEFAULT_WHEELBASE};
use crate::error::{Error, Result};
use crate::geometry::{ConvexPolytope, OcclusionGeom, Point2};
use crate::occlusion::{GaussianTarget, WeightMode};

pub use pathfollow::plan_pathfollow;
pub use scp::{best_xi, occlusion_slacks, ompc_proxy, plan_croa, plan_ompc, plan_tracking, OcclusionCost};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Croa,
    Ompc,
    Tracking,
    Pf,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 4] = [PlannerKind::Croa, PlannerKind::Ompc, PlannerKind::Tracking, PlannerKind::Pf];

    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Croa => "croa",
            PlannerKind::Ompc => "ompc",
            PlannerKind::Tracking => "tracking",
            PlannerKind::Pf => "pf",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "croa" => Ok(PlannerKind::Croa),
            "ompc" => Ok(PlannerKind::Ompc),
            "tracking" | "rda" => Ok(PlannerKind::Tracking),
            "pf" | "pathfollow" => Ok(PlannerKind::Pf),
            other => Err(Error::Config(format!("unknown planner '{other}'"))),
        }
    }
}

/// How the per-sample slack `xi` is treated inside the trajectory subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackMode {
    /// `xi` and `w` are decision variables next to the trajectory.
    #[default]
    Joint,
    /// `xi` is held at its closed-form value while the trajectory moves.
    Alternating,
}

/// How the occlusion part of a subproblem reaches the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionMethod {
    /// Slacks minimized per sample in closed form; the resulting convex
    /// function of the terminal position enters through tangent cuts.
    #[default]
    Cuts,
    /// One rotated cone per (sample, obstacle) pair with explicit slacks.
    Cones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub rho: f64,
    pub horizon: usize,
    pub dt: f64,
    pub samples: usize,
    pub d0: f64,
    pub bounds: ControlBounds,
    pub ccp_iters: usize,
    pub alt_iters: usize,
    pub penalty_occlusion: f64,
    pub penalty_collision_slack: f64,
    /// Weight on the per-constraint hinge slacks, per m^2 of violation.
    pub penalty_hinge: f64,
    pub xi_floor: f64,
    /// Upper clamp on `xi`; beyond it the hinge slack carries the residual.
    pub xi_cap: f64,
    pub nominal_speed: f64,
    pub seed: u64,
    pub wheelbase: f64,
    pub weight_mode: WeightMode,
    pub slack_mode: SlackMode,
    pub occlusion_method: OcclusionMethod,
    /// Impose the occlusion cones without hinge slacks.
    pub hard_occlusion: bool,
    /// Sample/obstacle pairs that stay clear of occlusion within this
    /// distance of the expansion point are left out of the subproblem.
    /// Infinite keeps every pair.
    pub prune_radius: f64,
    pub trust_speed: f64,
    pub trust_steer: f64,
    pub solver_tol: f64,
    pub solver_max_iters: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            horizon: 10,
            dt: 0.3,
            samples: 200,
            d0: 1.0,
            bounds: ControlBounds::default(),
            ccp_iters: 3,
            alt_iters: 3,
            penalty_occlusion: 50.0,
            penalty_collision_slack: 1e4,
            penalty_hinge: 50.0,
            xi_floor: 1e-6,
            xi_cap: 11.0,
            nominal_speed: 6.0,
            seed: 0,
            wheelbase: DEFAULT_WHEELBASE,
            weight_mode: WeightMode::Density,
            slack_mode: SlackMode::Joint,
            occlusion_method: OcclusionMethod::Cuts,
            hard_occlusion: false,
            prune_radius: 4.0,
            trust_speed: 2.0,
            trust_steer: 0.25,
            solver_tol: crate::convexprog::DEFAULT_TOL,
            solver_max_iters: crate::convexprog::DEFAULT_MAX_ITERS,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("d0", self.d0),
            ("nominal_speed", self.nominal_speed),
            ("wheelbase", self.wheelbase),
            ("xi_floor", self.xi_floor),
            ("trust_speed", self.trust_speed),
            ("trust_steer", self.trust_steer),
            ("solver_tol", self.solver_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("rho", self.rho),
            ("penalty_occlusion", self.penalty_occlusion),
            ("penalty_collision_slack", self.penalty_collision_slack),
            ("penalty_hinge", self.penalty_hinge),
            ("prune_radius", if self.prune_radius == f64::INFINITY { 0.0 } else { self.prune_radius }),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.xi_cap <= 1.0 || self.xi_cap < self.xi_floor {
            return Err(Error::Config("xi_cap must exceed 1 and xi_floor".into()));
        }
        if !self.bounds.is_valid() {
            return Err(Error::Config("control bounds are inconsistent".into()));
        }
        Ok(())
    }
}

/// What a planner sees at one frame.
#[derive(Debug, Clone, Copy)]
pub struct World<'a> {
    pub robot: State,
    pub obstacles: &'a [ConvexPolytope],
    pub geoms: &'a [OcclusionGeom],
    pub target: &'a GaussianTarget,
    pub ego: &'a EgoShape,
    /// Frame counter, mixed into the sample seed.
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OcclusionSlack {
    pub xi: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Ok,
    /// Some subproblem failed; the result is the best accepted iterate.
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub solver_failures: usize,
    pub objective_trace: Vec<f64>,
    pub solve_time: f64,
    /// Largest dual stationarity residual over the collision rows.
    pub max_stationarity_residual: f64,
    /// Largest collision slack used by the final accepted subproblem.
    pub max_collision_slack: f64,
    pub status: PlanStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub slacks: OcclusionSlack,
    pub occl_estimate: f64,
    pub duals: Vec<Vec<DualPair>>,
    pub diagnostics: Diagnostics,
}

impl PlanResult {
    pub fn first_control(&self) -> crate::dynamics::Control {
        self.trajectory.controls[0]
    }
}

pub type Waypoints = Vec<State>;

/// Straight-line waypoints toward the target at nominal spacing, clamped at
/// the target.
pub fn reference_waypoints(s: &State, target_mean: &Point2, cfg: &PlannerConfig) -> Result<Waypoints> {
    let p = s.position();
    let delta = target_mean - p;
    let dist = delta.norm();
    if dist < 1e-6 {
        return Err(Error::DegenerateTarget);
    }
    let dir = delta / dist;
    let bearing = dir.y.atan2(dir.x);
    Ok((0..=cfg.horizon)
        .map(|h| {
            let along = (h as f64 * cfg.dt * cfg.nominal_speed).min(dist);
            let q = p + dir * along;
            State::new(q.x, q.y, bearing)
        })
        .collect())
}

/// `rho · sum_h |s_h - s_h^ref|^2` with the heading difference wrapped.
pub fn tracking_cost(traj: &[State], waypoints: &[State], rho: f64) -> f64 {
    assert_eq!(traj.len(), waypoints.len(), "trajectory and waypoints differ in length");
    rho * traj
        .iter()
        .zip(waypoints)
        .map(|(s, w)| {
            let dh = wrap_angle(s.heading - w.heading);
            (s.x - w.x).powi(2) + (s.y - w.y).powi(2) + dh * dh
        })
        .sum::<f64>()
}

pub fn plan(kind: PlannerKind, world: &World<'_>, warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    match kind {
        PlannerKind::Croa => plan_croa(world, warm, cfg),
        PlannerKind::Ompc => plan_ompc(world, warm, cfg),
        PlannerKind::Tracking => plan_tracking(world, warm, cfg),
        PlannerKind::Pf => plan_pathfollow(world, warm, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waypoint_arithmetic() {
        let cfg = PlannerConfig {
            nominal_speed: 5.0,
            ..Default::default()
        };
        let wp = reference_waypoints(&State::new(0.0, 0.0, 0.0), &Point2::new(10.0, 0.0), &cfg).unwrap();
        assert_eq!(wp.len(), 11);
        assert!((wp[2].x - 3.0).abs() < 1e-12 && wp[2].y == 0.0);
    }

    #[test]
    fn waypoints_clamp_at_target() {
        let cfg = PlannerConfig {
            nominal_speed: 5.0,
            ..Default::default()
        };
        let wp = reference_waypoints(&State::new(0.0, 0.0, 0.0), &Point2::new(1.0, 0.0), &cfg).unwrap();
        assert!(wp[1..].iter().all(|s| s.x == 1.0 && s.y == 0.0));
        assert!(matches!(
            reference_waypoints(&State::new(1.0, 0.0, 0.0), &Point2::new(1.0, 0.0), &cfg),
            Err(Error::DegenerateTarget)
        ));
    }

    #[test]
    fn tracking_cost_examples() {
        let a = vec![State::new(0.0, 0.0, 0.0), State::new(1.0, 2.0, 0.5)];
        assert_eq!(tracking_cost(&a, &a, 3.0), 0.0);
        let b = vec![State::new(1.0, 0.0, 0.0)];
        assert_eq!(tracking_cost(&b, &[State::new(0.0, 0.0, 0.0)], 2.0), 2.0);
        // wrapped heading difference
        let c = tracking_cost(&[State::new(0.0, 0.0, 3.1)], &[State::new(0.0, 0.0, -3.1)], 1.0);
        assert!((c - (2.0 * std::f64::consts::PI - 6.2).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PlannerConfig::default().validate().is_ok());
        let bad = PlannerConfig {
            horizon: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("RDA".parse::<PlannerKind>().unwrap(), PlannerKind::Tracking);
    }
}
