//! Occlusion-aware receding-horizon planning for a car-like robot among
//! convex polygonal obstacles, with a closed-loop lidar simulator.

pub mod collision;
pub mod convexprog;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod occlusion;
pub mod planner;
pub mod simulator;

pub use error::{Error, Result};
