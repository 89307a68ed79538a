//! Closed-loop world: exact dynamics, a planar ray-cast lidar, and
//! detection metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::collision::EgoShape;
use crate::dynamics::{step, Control, State};
use crate::error::{Error, Result};
use crate::geometry::{exact_distance, occlusion_discs, ray_cast, ConvexPolytope, OcclusionGeom, Point2, Vector2};
use crate::occlusion::{draw_samples, occlusion_probability, GaussianTarget, SampleSet, WeightMode};
use crate::planner::{plan, PlanResult, PlanStatus, PlannerConfig, PlannerKind, World};

pub const DEFAULT_DETECT_THRESHOLD: usize = 10;

/// Samples behind the per-frame occlusion estimate logged by the simulator.
const ESTIMATE_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub ray_count: usize,
    pub fov: f64,
    pub max_range: f64,
    pub rate: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            ray_count: 1800,
            fov: 2.0 * PI,
            max_range: 40.0,
            rate: 1.0 / 0.3,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.ray_count == 0 {
            return Err("ray_count must be at least 1".into());
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI + 1e-12) {
            return Err(format!("fov {} outside (0, 2pi]", self.fov));
        }
        if !(self.max_range > 0.0) || !(self.rate > 0.0) {
            return Err("max_range and rate must be positive".into());
        }
        Ok(())
    }

    /// Ray bearings relative to the heading.
    pub fn bearings(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.ray_count as f64;
        let full = (self.fov - 2.0 * PI).abs() < 1e-12;
        (0..self.ray_count).map(move |i| {
            if full {
                -PI + self.fov * i as f64 / n
            } else {
                -0.5 * self.fov + self.fov * (i as f64 + 0.5) / n
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub obstacles: Vec<ConvexPolytope>,
    pub geoms: Vec<OcclusionGeom>,
    pub target_truth: ConvexPolytope,
    pub target_belief: GaussianTarget,
    pub robot_start: State,
    pub ego: EgoShape,
    pub lidar: LidarConfig,
    pub max_sim_time: f64,
    pub goal_radius: f64,
    pub detect_threshold: usize,
    /// Half-width of the uniform per-seed offset applied to obstacles and target.
    pub perturbation: f64,
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        obstacles: Vec<ConvexPolytope>,
        target_truth: ConvexPolytope,
        target_belief: GaussianTarget,
        robot_start: State,
        ego: EgoShape,
        lidar: LidarConfig,
    ) -> Self {
        let geoms = occlusion_discs(&obstacles);
        Self {
            name: name.into(),
            obstacles,
            geoms,
            target_truth,
            target_belief,
            robot_start,
            ego,
            lidar,
            max_sim_time: 30.0,
            goal_radius: 3.0,
            detect_threshold: DEFAULT_DETECT_THRESHOLD,
            perturbation: 0.0,
        }
    }

    /// Copy with every obstacle and the target (truth and belief together)
    /// shifted by an independent uniform offset in `[-a, a]^2`.
    pub fn perturbed(&self, seed: u64) -> Scenario {
        if self.perturbation <= 0.0 {
            return self.clone();
        }
        let a = self.perturbation;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = || Vector2::new(rng.random_range(-a..=a), rng.random_range(-a..=a));
        let obstacles: Vec<ConvexPolytope> = self.obstacles.iter().map(|o| o.translate(&offset())).collect();
        let shift = offset();
        let mut out = self.clone();
        out.geoms = occlusion_discs(&obstacles);
        out.obstacles = obstacles;
        out.target_truth = self.target_truth.translate(&shift);
        out.target_belief.mean += shift;
        out
    }

    /// Problems that make the scenario unusable, in a fixed order.
    pub fn check(&self, d0: f64) -> Vec<String> {
        let mut issues = Vec::new();
        for (k, o) in self.obstacles.iter().enumerate() {
            if let Err(e) = o.check_invariants() {
                issues.push(format!("obstacle {k}: {e}"));
            }
        }
        if let Err(e) = self.lidar.validate() {
            issues.push(format!("lidar: {e}"));
        }
        let body = self.ego.at(&self.robot_start);
        for (k, o) in self.obstacles.iter().enumerate() {
            let d = exact_distance(&body, o);
            if d < d0 {
                issues.push(format!("robot start is {d:.3} m from obstacle {k}, below the safety distance {d0}"));
            }
        }
        if exact_distance_point(&self.target_truth, &self.target_belief.mean) > 2.0 {
            issues.push("target belief mean is more than 2 m from the target body".into());
        }
        if !(self.max_sim_time > 0.0) || !(self.goal_radius > 0.0) {
            issues.push("max_sim_time and goal_radius must be positive".into());
        }
        issues
    }
}

fn exact_distance_point(poly: &ConvexPolytope, p: &Point2) -> f64 {
    if poly.contains(p, 0.0) {
        return 0.0;
    }
    (0..poly.face_count())
        .map(|i| {
            let (a, b) = poly.edge(i);
            crate::geometry::point_segment_distance(p, &a, &b)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Number of lidar rays whose first return is on the target body.
pub fn sense(robot: &State, scenario: &Scenario) -> usize {
    let mut polys: Vec<ConvexPolytope> = scenario.obstacles.clone();
    polys.push(scenario.target_truth.clone());
    sense_with(robot, &polys, scenario.obstacles.len(), &scenario.lidar)
}

fn sense_with(robot: &State, polys: &[ConvexPolytope], target_index: usize, lidar: &LidarConfig) -> usize {
    let origin = robot.position();
    lidar
        .bearings()
        .filter(|b| {
            let a = robot.heading + b;
            let dir = Vector2::new(a.cos(), a.sin());
            matches!(ray_cast(&origin, &dir, polys, lidar.max_range), Some(hit) if hit.index == target_index)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub time: f64,
    pub robot: State,
    pub control: Control,
    pub target_points: usize,
    pub detectable: bool,
    pub occl_estimate: f64,
    pub min_clearance: f64,
    /// Wall-clock planning time; not deterministic.
    pub solve_time: f64,
    pub iterations: usize,
    pub status: FrameStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    SolverFailure,
    /// The planner returned an error; the robot braked.
    PlannerError,
}

impl FrameStatus {
    pub fn name(self) -> &'static str {
        match self {
            FrameStatus::Ok => "ok",
            FrameStatus::SolverFailure => "solver_failure",
            FrameStatus::PlannerError => "planner_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub detectable_frames: usize,
    pub total_frames: usize,
    pub occlusion_ratio: f64,
    pub point_count_series: Vec<usize>,
    pub time_to_target: Option<f64>,
    pub min_clearance_overall: f64,
    pub mean_points: f64,
    pub median_points: f64,
    pub top15_points: f64,
}

/// Frame statistics. `time_to_target` is left empty; `run` fills it.
pub fn aggregate(records: &[FrameRecord], threshold: usize) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::DegenerateInput("no frames to aggregate".into()));
    }
    let series: Vec<usize> = records.iter().map(|r| r.target_points).collect();
    let n = series.len();
    let detectable = series.iter().filter(|&&p| p >= threshold).count();
    let mut sorted = series.clone();
    sorted.sort_unstable();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64
    };
    let top = ((0.15 * n as f64).ceil() as usize).max(1);
    let top15 = sorted[n - top..].iter().sum::<usize>() as f64 / top as f64;
    Ok(Metrics {
        detectable_frames: detectable,
        total_frames: n,
        occlusion_ratio: 1.0 - detectable as f64 / n as f64,
        mean_points: series.iter().sum::<usize>() as f64 / n as f64,
        median_points: median,
        top15_points: top15,
        point_count_series: series,
        time_to_target: None,
        min_clearance_overall: records.iter().map(|r| r.min_clearance).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub records: Vec<FrameRecord>,
    /// Robot state after the last executed control.
    pub final_state: State,
    pub reached: bool,
    /// The scenario actually simulated (after the seed's perturbation).
    pub scenario: Scenario,
}

fn clearance(ego: &EgoShape, s: &State, obstacles: &[ConvexPolytope]) -> f64 {
    let body = ego.at(s);
    obstacles.iter().map(|o| exact_distance(&body, o)).fold(f64::INFINITY, f64::min)
}

/// Closed loop until the robot is within `goal_radius` of the belief mean,
/// the time budget runs out, or `max_steps` frames have been planned.
pub fn run(scenario: &Scenario, kind: PlannerKind, cfg: &PlannerConfig, seed: u64, max_steps: Option<usize>) -> Result<RunOutput> {
    cfg.validate()?;
    let sc = scenario.perturbed(seed);
    let cfg = PlannerConfig { seed, ..cfg.clone() };
    let estimate_samples: SampleSet = draw_samples(&sc.target_belief, ESTIMATE_SAMPLES, seed ^ 0x5e_ed0f_e571, WeightMode::Density)?;
    let mut polys = sc.obstacles.clone();
    polys.push(sc.target_truth.clone());

    let mut robot = sc.robot_start;
    let mut warm: Option<PlanResult> = None;
    let mut records = Vec::new();
    let mut reached_at = None;
    let max_frames = (sc.max_sim_time / cfg.dt + 1e-9).floor() as usize;
    let limit = max_steps.map_or(max_frames, |m| m.min(max_frames));
    let mut frame = 0usize;
    loop {
        let time = frame as f64 * cfg.dt;
        if (robot.position() - sc.target_belief.mean).norm() <= sc.goal_radius {
            reached_at = Some(time);
            break;
        }
        if frame >= limit {
            break;
        }
        let target_points = sense_with(&robot, &polys, sc.obstacles.len(), &sc.lidar);
        let world = World {
            robot,
            obstacles: &sc.obstacles,
            geoms: &sc.geoms,
            target: &sc.target_belief,
            ego: &sc.ego,
            frame: frame as u64,
        };
        let (control, status, solve_time, iterations) = match plan(kind, &world, warm.as_ref(), &cfg) {
            Ok(res) => {
                let status = match res.diagnostics.status {
                    PlanStatus::Ok => FrameStatus::Ok,
                    PlanStatus::SolverFailure => FrameStatus::SolverFailure,
                };
                let out = (res.first_control(), status, res.diagnostics.solve_time, res.diagnostics.iterations);
                warm = Some(res);
                out
            }
            Err(_) => {
                warm = None;
                (Control::STOP, FrameStatus::PlannerError, 0.0, 0)
            }
        };
        records.push(FrameRecord {
            time,
            robot,
            control,
            target_points,
            detectable: target_points >= sc.detect_threshold,
            occl_estimate: occlusion_probability(&robot.position(), &estimate_samples, &sc.geoms),
            min_clearance: clearance(&sc.ego, &robot, &sc.obstacles),
            solve_time,
            iterations,
            status,
        });
        robot = step(&robot, &control, cfg.dt, cfg.wheelbase);
        frame += 1;
    }
    let mut metrics = if records.is_empty() {
        Metrics {
            detectable_frames: 0,
            total_frames: 0,
            occlusion_ratio: 0.0,
            point_count_series: Vec::new(),
            time_to_target: None,
            min_clearance_overall: f64::INFINITY,
            mean_points: 0.0,
            median_points: 0.0,
            top15_points: 0.0,
        }
    } else {
        aggregate(&records, sc.detect_threshold)?
    };
    metrics.time_to_target = reached_at;
    metrics.min_clearance_overall = metrics.min_clearance_overall.min(clearance(&sc.ego, &robot, &sc.obstacles));
    Ok(RunOutput {
        metrics,
        records,
        final_state: robot,
        reached: reached_at.is_some(),
        scenario: sc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> ConvexPolytope {
        ConvexPolytope::rectangle(Point2::new(x, y), 4.6, 1.9, 0.0).unwrap()
    }

    fn open_road(obstacles: Vec<ConvexPolytope>) -> Scenario {
        Scenario::new(
            "test",
            obstacles,
            car(30.0, 0.0),
            GaussianTarget::isotropic(Point2::new(30.0, 0.0), 0.5).unwrap(),
            State::new(0.0, 0.0, 0.0),
            EgoShape::default(),
            LidarConfig::default(),
        )
    }

    #[test]
    fn unobstructed_target_is_seen() {
        let sc = open_road(vec![]);
        let n = sense(&State::new(10.0, 0.0, 0.0), &sc);
        // 1.9 m wide at 17.7 m (nearest face) subtends about 6.1 degrees
        assert!(n > 20, "points {n}");
    }

    #[test]
    fn full_cover_hides_target() {
        let blocker = ConvexPolytope::rectangle(Point2::new(20.0, 0.0), 1.0, 6.0, 0.0).unwrap();
        let sc = open_road(vec![blocker]);
        assert_eq!(sense(&State::new(10.0, 0.0, 0.0), &sc), 0);
    }

    #[test]
    fn aggregate_arithmetic() {
        let rec = |p: usize| FrameRecord {
            time: 0.0,
            robot: State::new(0.0, 0.0, 0.0),
            control: Control::STOP,
            target_points: p,
            detectable: p >= 10,
            occl_estimate: 0.0,
            min_clearance: 5.0,
            solve_time: 0.0,
            iterations: 0,
            status: FrameStatus::Ok,
        };
        let m = aggregate(&[rec(0), rec(0), rec(10), rec(20)], 10).unwrap();
        assert_eq!(m.detectable_frames, 2);
        assert_eq!(m.occlusion_ratio, 0.5);
        assert_eq!(m.median_points, 5.0);
        assert_eq!(m.top15_points, 20.0);
        assert_eq!(m.mean_points, 7.5);
        assert!(aggregate(&[], 10).is_err());
    }

    #[test]
    fn free_space_run_reaches_target() {
        let sc = open_road(vec![]);
        let cfg = PlannerConfig::default();
        let out = run(&sc, PlannerKind::Tracking, &cfg, 0, None).unwrap();
        assert!(out.reached);
        assert_eq!(out.metrics.occlusion_ratio, 0.0);
        let t = out.metrics.time_to_target.unwrap();
        let ideal = (30.0 - sc.goal_radius) / cfg.nominal_speed;
        assert!(t >= ideal - 1e-9 && t <= ideal + 1.5, "time {t}");
        // the state sequence is the rollout of the logged controls
        let mut s = sc.robot_start;
        for r in &out.records {
            assert_eq!(r.robot, s);
            s = step(&s, &r.control, cfg.dt, cfg.wheelbase);
        }
        assert_eq!(s, out.final_state);
    }
}
