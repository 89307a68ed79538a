//! Pure-pursuit path follower along the straight line to the target. It
//! never plans around anything: when the next step would cut into the
//! safety distance it simply stops.

use std::time::Instant;

use crate::dynamics::{rollout, step, wrap_angle, Control, State};
use crate::error::Result;
use crate::geometry::{exact_distance, Point2};

use super::{Diagnostics, OcclusionSlack, PlanResult, PlanStatus, PlannerConfig, World};

/// Lookahead distance for the pursuit point, meters.
const LOOKAHEAD: f64 = 6.0;

fn pursuit(s: &State, start: &Point2, goal: &Point2, cfg: &PlannerConfig) -> Control {
    let line = goal - start;
    let len = line.norm();
    let to_goal = (goal - s.position()).norm();
    if len < 1e-6 || to_goal < 1e-6 {
        return Control::STOP;
    }
    let dir = line / len;
    let along = (s.position() - start).dot(&dir);
    let aim = start + dir * (along + LOOKAHEAD).clamp(0.0, len);
    let d = aim - s.position();
    let ld = d.norm().max(1e-6);
    let alpha = wrap_angle(d.y.atan2(d.x) - s.heading);
    let steer = (2.0 * cfg.wheelbase * alpha.sin() / ld).atan();
    let speed = cfg.nominal_speed.min(to_goal / cfg.dt);
    cfg.bounds.clip(Control::new(speed, steer))
}

fn safe(s: &State, world: &World<'_>, d0: f64) -> bool {
    let body = world.ego.at(s);
    world.obstacles.iter().all(|o| exact_distance(&body, o) >= d0)
}

pub fn plan_pathfollow(world: &World<'_>, _warm: Option<&PlanResult>, cfg: &PlannerConfig) -> Result<PlanResult> {
    let started = Instant::now();
    cfg.validate()?;
    let start = world.robot.position();
    let goal = world.target.mean;
    let mut s = world.robot;
    let mut controls = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let mut u = pursuit(&s, &start, &goal, cfg);
        let next = step(&s, &u, cfg.dt, cfg.wheelbase);
        if !safe(&next, world, cfg.d0) {
            u = Control::new(0.0, u.steer);
        }
        s = step(&s, &u, cfg.dt, cfg.wheelbase);
        controls.push(u);
    }
    Ok(PlanResult {
        trajectory: rollout(&world.robot, &controls, cfg.dt, cfg.wheelbase),
        slacks: OcclusionSlack::default(),
        occl_estimate: 0.0,
        duals: Vec::new(),
        diagnostics: Diagnostics {
            iterations: 0,
            accepted_steps: 0,
            solver_failures: 0,
            objective_trace: Vec::new(),
            solve_time: started.elapsed().as_secs_f64(),
            max_stationarity_residual: 0.0,
            max_collision_slack: 0.0,
            status: PlanStatus::Ok,
        },
    })
}
