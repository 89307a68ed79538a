//! Kinematic bicycle model with forward-Euler discretization.

use nalgebra::{Matrix3, Matrix3x2, Vector2 as NVector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::geometry::Point2;

/// Longitudinal wheelbase of the ego car, meters.
pub const DEFAULT_WHEELBASE: f64 = 2.87;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl State {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub speed: f64,
    pub steer: f64,
}

impl Control {
    pub const STOP: Control = Control { speed: 0.0, steer: 0.0 };

    pub fn new(speed: f64, steer: f64) -> Self {
        Self { speed, steer }
    }

    pub fn as_vector(&self) -> NVector2<f64> {
        NVector2::new(self.speed, self.steer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub min: Control,
    pub max: Control,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            min: Control::new(0.0, -0.6),
            max: Control::new(8.0, 0.6),
        }
    }
}

impl ControlBounds {
    pub fn is_valid(&self) -> bool {
        self.min.speed <= self.max.speed
            && self.min.steer <= self.max.steer
            && self.max.steer.abs() < PI / 2.0
            && self.min.steer.abs() < PI / 2.0
    }

    pub fn clip(&self, u: Control) -> Control {
        Control {
            speed: u.speed.clamp(self.min.speed, self.max.speed),
            steer: u.steer.clamp(self.min.steer, self.max.steer),
        }
    }

    pub fn contains(&self, u: &Control) -> bool {
        (self.min.speed..=self.max.speed).contains(&u.speed) && (self.min.steer..=self.max.steer).contains(&u.steer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub dt: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn is_consistent(&self) -> bool {
        self.dt > 0.0 && self.states.len() == self.controls.len() + 1
    }
}

/// Continuous-time bicycle kinematics `f(s, u)`.
fn rates(s: &State, u: &Control, wheelbase: f64) -> Vector3<f64> {
    Vector3::new(
        u.speed * s.heading.cos(),
        u.speed * s.heading.sin(),
        u.speed * u.steer.tan() / wheelbase,
    )
}

/// Euler step without heading wrap.
pub fn step_unwrapped(s: &State, u: &Control, dt: f64, wheelbase: f64) -> Vector3<f64> {
    s.as_vector() + rates(s, u, wheelbase) * dt
}

pub fn step(s: &State, u: &Control, dt: f64, wheelbase: f64) -> State {
    let n = step_unwrapped(s, u, dt, wheelbase);
    State::new(n.x, n.y, n.z)
}

/// Affine model `s' ≈ A s + B u + c`, exact at the reference point (before
/// heading wrap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
}

impl Linearization {
    pub fn apply_unwrapped(&self, s: &Vector3<f64>, u: &NVector2<f64>) -> Vector3<f64> {
        self.a * s + self.b * u + self.c
    }

    pub fn apply(&self, s: &State, u: &Control) -> State {
        let n = self.apply_unwrapped(&s.as_vector(), &u.as_vector());
        State::new(n.x, n.y, n.z)
    }
}

pub fn linearize(s_ref: &State, u_ref: &Control, dt: f64, wheelbase: f64) -> Linearization {
    let (sin_h, cos_h) = s_ref.heading.sin_cos();
    let v = u_ref.speed;
    let psi = u_ref.steer;
    let sec2 = 1.0 / (psi.cos() * psi.cos());
    let a = Matrix3::new(
        1.0, 0.0, -v * sin_h * dt, //
        0.0, 1.0, v * cos_h * dt, //
        0.0, 0.0, 1.0,
    );
    let b = Matrix3x2::new(
        cos_h * dt, 0.0, //
        sin_h * dt, 0.0, //
        psi.tan() / wheelbase * dt, v * sec2 / wheelbase * dt,
    );
    let next = step_unwrapped(s_ref, u_ref, dt, wheelbase);
    let c = next - a * s_ref.as_vector() - b * u_ref.as_vector();
    Linearization { a, b, c }
}

pub fn rollout(s0: &State, controls: &[Control], dt: f64, wheelbase: f64) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    for u in controls {
        let next = step(states.last().unwrap(), u, dt, wheelbase);
        states.push(next);
    }
    Trajectory {
        states,
        controls: controls.to_vec(),
        dt,
    }
}

/// Headings of `states` made continuous, starting from the first one.
pub fn unwrapped_headings(states: &[State]) -> Vec<f64> {
    let mut out = Vec::with_capacity(states.len());
    for s in states {
        match out.last() {
            None => out.push(s.heading),
            Some(&prev) => out.push(prev + wrap_angle(s.heading - prev)),
        }
    }
    out
}
