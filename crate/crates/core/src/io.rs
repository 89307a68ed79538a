//! Scenario files, batch experiments, and result emission.
//!
//! Scenario schema (JSON, `format_version` 1):
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "name": "canonical",
//!   "obstacles": [ { "vertices_m": [[x, y], ...] }, ... ],
//!   "target": {
//!     "vertices_m": [[x, y], ...],
//!     "belief_mean_m": [x, y],
//!     "belief_covariance_m2": [[sxx, sxy], [sxy, syy]]
//!   },
//!   "robot_start": { "x_m": 0.0, "y_m": 0.0, "heading_rad": 0.0 },
//!   "ego": { "vertices_m": [[x, y], ...] },          // optional, body frame
//!   "lidar": { "ray_count": 1800, "fov_rad": 6.283185307179586,
//!              "max_range_m": 40.0, "rate_hz": 3.3333333333333335 },
//!   "max_sim_time_s": 30.0,
//!   "goal_radius_m": 3.0,
//!   "detect_threshold_points": 10,
//!   "perturbation_m": 2.0
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::EgoShape;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::geometry::{ConvexPolytope, Point2};
use crate::occlusion::GaussianTarget;
use crate::planner::{PlannerConfig, PlannerKind};
use crate::simulator::{run, FrameRecord, LidarConfig, Metrics, RunOutput, Scenario, DEFAULT_DETECT_THRESHOLD};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolygonFile {
    vertices_m: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    vertices_m: Vec<[f64; 2]>,
    belief_mean_m: [f64; 2],
    belief_covariance_m2: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartFile {
    x_m: f64,
    y_m: f64,
    heading_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LidarFile {
    ray_count: usize,
    fov_rad: f64,
    max_range_m: f64,
    rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format_version: u32,
    name: String,
    obstacles: Vec<PolygonFile>,
    target: TargetFile,
    robot_start: StartFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ego: Option<PolygonFile>,
    lidar: LidarFile,
    max_sim_time_s: f64,
    goal_radius_m: f64,
    #[serde(default = "default_threshold")]
    detect_threshold_points: usize,
    #[serde(default)]
    perturbation_m: f64,
}

fn default_threshold() -> usize {
    DEFAULT_DETECT_THRESHOLD
}

fn points(v: &[[f64; 2]]) -> Vec<Point2> {
    v.iter().map(|p| Point2::new(p[0], p[1])).collect()
}

fn pairs(v: &[Point2]) -> Vec<[f64; 2]> {
    v.iter().map(|p| [p.x, p.y]).collect()
}

/// 1-based line of the `nth` occurrence of `needle` after the first
/// occurrence of `anchor`.
fn line_of(text: &str, anchor: &str, needle: &str, nth: usize) -> usize {
    let start = text.find(anchor).unwrap_or(0);
    let mut pos = start;
    for i in 0..=nth {
        match text[pos..].find(needle) {
            Some(off) => {
                pos += off;
                if i < nth {
                    pos += needle.len();
                }
            }
            None => {
                pos = start;
                break;
            }
        }
    }
    text[..pos].matches('\n').count() + 1
}

fn violation(text: &str, anchor: &str, needle: &str, nth: usize, msg: String) -> Error {
    Error::InvariantViolation {
        line: line_of(text, anchor, needle, nth),
        msg,
    }
}

/// Parses and checks a scenario given as JSON text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(violation(
            text,
            "\"format_version\"",
            "\"format_version\"",
            0,
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    let mut obstacles = Vec::with_capacity(file.obstacles.len());
    for (k, o) in file.obstacles.iter().enumerate() {
        let poly = ConvexPolytope::from_vertices(&points(&o.vertices_m))
            .map_err(|e| violation(text, "\"obstacles\"", "\"vertices_m\"", k, format!("obstacle {k}: {e}")))?;
        obstacles.push(poly);
    }
    let target_truth = ConvexPolytope::from_vertices(&points(&file.target.vertices_m))
        .map_err(|e| violation(text, "\"target\"", "\"vertices_m\"", 0, format!("target: {e}")))?;
    let [[a, b], [c, d]] = file.target.belief_covariance_m2;
    let mean = Point2::new(file.target.belief_mean_m[0], file.target.belief_mean_m[1]);
    let belief = GaussianTarget::new(mean, Matrix2::new(a, b, c, d)).map_err(|e| {
        violation(text, "\"target\"", "\"belief_covariance_m2\"", 0, format!("target belief: {e}"))
    })?;
    let ego = match &file.ego {
        Some(e) => ConvexPolytope::from_vertices(&points(&e.vertices_m))
            .and_then(EgoShape::new)
            .map_err(|err| violation(text, "\"ego\"", "\"vertices_m\"", 0, format!("ego: {err}")))?,
        None => EgoShape::default(),
    };
    let lidar = LidarConfig {
        ray_count: file.lidar.ray_count,
        fov: file.lidar.fov_rad,
        max_range: file.lidar.max_range_m,
        rate: file.lidar.rate_hz,
    };
    let start = &file.robot_start;
    let mut sc = Scenario::new(
        file.name.clone(),
        obstacles,
        target_truth,
        belief,
        State::new(start.x_m, start.y_m, start.heading_rad),
        ego,
        lidar,
    );
    sc.max_sim_time = file.max_sim_time_s;
    sc.goal_radius = file.goal_radius_m;
    sc.detect_threshold = file.detect_threshold_points;
    sc.perturbation = file.perturbation_m;
    if let Some(msg) = sc.check(PlannerConfig::default().d0).into_iter().next() {
        let (anchor, needle, nth) = match msg.strip_prefix("obstacle ").and_then(|r| r.split(':').next()?.parse::<usize>().ok()) {
            Some(k) => ("\"obstacles\"", "\"vertices_m\"", k),
            None if msg.starts_with("lidar") => ("\"lidar\"", "\"lidar\"", 0),
            None if msg.starts_with("robot start") => ("\"robot_start\"", "\"robot_start\"", 0),
            None if msg.starts_with("target") => ("\"target\"", "\"belief_mean_m\"", 0),
            None => ("\"max_sim_time_s\"", "\"max_sim_time_s\"", 0),
        };
        return Err(violation(text, anchor, needle, nth, msg));
    }
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    parse_scenario(&fs::read_to_string(path)?)
}

fn to_file(sc: &Scenario) -> ScenarioFile {
    let cov = sc.target_belief.covariance;
    ScenarioFile {
        format_version: FORMAT_VERSION,
        name: sc.name.clone(),
        obstacles: sc
            .obstacles
            .iter()
            .map(|o| PolygonFile {
                vertices_m: pairs(o.vertices()),
            })
            .collect(),
        target: TargetFile {
            vertices_m: pairs(sc.target_truth.vertices()),
            belief_mean_m: [sc.target_belief.mean.x, sc.target_belief.mean.y],
            belief_covariance_m2: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        },
        robot_start: StartFile {
            x_m: sc.robot_start.x,
            y_m: sc.robot_start.y,
            heading_rad: sc.robot_start.heading,
        },
        ego: Some(PolygonFile {
            vertices_m: pairs(sc.ego.body.vertices()),
        }),
        lidar: LidarFile {
            ray_count: sc.lidar.ray_count,
            fov_rad: sc.lidar.fov,
            max_range_m: sc.lidar.max_range,
            rate_hz: sc.lidar.rate,
        },
        max_sim_time_s: sc.max_sim_time,
        goal_radius_m: sc.goal_radius,
        detect_threshold_points: sc.detect_threshold,
        perturbation_m: sc.perturbation,
    }
}

pub fn scenario_to_json(sc: &Scenario) -> String {
    serde_json::to_string_pretty(&to_file(sc)).expect("scenario serializes") + "\n"
}

pub fn save_scenario(sc: &Scenario, path: &Path) -> Result<()> {
    fs::write(path, scenario_to_json(sc))?;
    Ok(())
}

/// Planner configuration from a JSON file; absent fields keep defaults.
pub fn load_config(path: &Path) -> Result<PlannerConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: PlannerConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Fixed 17-significant-digit rendering; non-finite values become `null`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

/// One JSON object per frame. Wall-clock solve time is written only when
/// `timing` is set, so default logs are byte-reproducible.
pub fn frame_log(records: &[FrameRecord], timing: bool) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let _ = write!(
            out,
            "{{\"format_version\":{FORMAT_VERSION},\"frame\":{i},\"time_s\":{},\"x_m\":{},\"y_m\":{},\"heading_rad\":{},\
             \"speed_mps\":{},\"steer_rad\":{},\"target_points\":{},\"detectable\":{},\"occl_estimate\":{},\
             \"min_clearance_m\":{},\"iterations\":{},\"status\":\"{}\"",
            num(r.time),
            num(r.robot.x),
            num(r.robot.y),
            num(r.robot.heading),
            num(r.control.speed),
            num(r.control.steer),
            r.target_points,
            r.detectable,
            num(r.occl_estimate),
            num(r.min_clearance),
            r.iterations,
            r.status.name(),
        );
        if timing {
            let _ = write!(out, ",\"solve_time_s\":{}", num(r.solve_time));
        }
        out.push_str("}\n");
    }
    out
}

pub fn write_frame_log(records: &[FrameRecord], path: &Path, timing: bool) -> Result<()> {
    fs::write(path, frame_log(records, timing))?;
    Ok(())
}

/// Plot data for one run: point-count CDF, occlusion timeline, trajectory.
pub fn emit_plot_data(records: &[FrameRecord], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "no frame records to plot")));
    }
    fs::create_dir_all(dir)?;
    let (cdf, timeline, traj) = plot_tables(records);
    let files = [
        (dir.join(format!("{stem}_cdf.csv")), cdf),
        (dir.join(format!("{stem}_timeline.csv")), timeline),
        (dir.join(format!("{stem}_trajectory.csv")), traj),
    ];
    let mut out = Vec::new();
    for (path, body) in files {
        fs::write(&path, body)?;
        out.push(path);
    }
    Ok(out)
}

/// `(cdf, timeline, trajectory)` CSV bodies.
pub fn plot_tables(records: &[FrameRecord]) -> (String, String, String) {
    let n = records.len() as f64;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.target_points).or_default() += 1;
    }
    let mut cdf = format!("# format_version {FORMAT_VERSION}\ntarget_points,cumulative_fraction\n");
    let mut acc = 0usize;
    for (p, c) in counts {
        acc += c;
        let _ = writeln!(cdf, "{p},{}", num(acc as f64 / n));
    }
    let mut timeline = format!("# format_version {FORMAT_VERSION}\nframe,time_s,target_points,detectable\n");
    let mut traj = format!("# format_version {FORMAT_VERSION}\ntime_s,x_m,y_m,heading_rad\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(timeline, "{i},{},{},{}", num(r.time), r.target_points, u8::from(r.detectable));
        let _ = writeln!(traj, "{},{},{},{}", num(r.time), num(r.robot.x), num(r.robot.y), num(r.robot.heading));
    }
    (cdf, timeline, traj)
}

/// One batch: every planner over every seed on one scenario.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scenario_path: PathBuf,
    pub planners: Vec<PlannerKind>,
    pub seeds: Vec<u64>,
    pub config: PlannerConfig,
    pub output_dir: PathBuf,
    pub max_steps: Option<usize>,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub planner: PlannerKind,
    pub seed: u64,
    pub metrics: Metrics,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<RunRow>,
    /// `(planner, seed, message)` for runs that returned an error.
    pub failures: Vec<(PlannerKind, u64, String)>,
}

pub const RUNS_HEADER: &str = "format_version,scenario,planner,seed,total_frames,detectable_frames,occlusion_ratio,\
mean_points,median_points,top15_points,time_to_target_s,min_clearance_m,reached";

pub const SUMMARY_HEADER: &str = "format_version,scenario,planner,runs,mean_occlusion_ratio,mean_detectable_frames,\
mean_points,median_points,top15_points,reached_runs,mean_time_to_target_s,min_clearance_m";

pub fn runs_csv(scenario: &str, rows: &[RunRow]) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{FORMAT_VERSION},{scenario},{},{},{},{},{},{},{},{},{},{},{}",
            r.planner,
            r.seed,
            m.total_frames,
            m.detectable_frames,
            num(m.occlusion_ratio),
            num(m.mean_points),
            num(m.median_points),
            num(m.top15_points),
            m.time_to_target.map_or("null".to_string(), num),
            num(m.min_clearance_overall),
            u8::from(r.reached),
        );
    }
    out
}

pub fn summary_csv(scenario: &str, rows: &[RunRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    let mut planners: Vec<PlannerKind> = rows.iter().map(|r| r.planner).collect();
    planners.sort();
    planners.dedup();
    for p in planners {
        let sel: Vec<&RunRow> = rows.iter().filter(|r| r.planner == p).collect();
        let n = sel.len() as f64;
        let mean = |f: &dyn Fn(&Metrics) -> f64| sel.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let reached: Vec<f64> = sel.iter().filter_map(|r| r.metrics.time_to_target).collect();
        let mean_time = if reached.is_empty() {
            f64::NAN
        } else {
            reached.iter().sum::<f64>() / reached.len() as f64
        };
        let _ = writeln!(
            out,
            "{FORMAT_VERSION},{scenario},{p},{},{},{},{},{},{},{},{},{}",
            sel.len(),
            num(mean(&|m| m.occlusion_ratio)),
            num(mean(&|m| m.detectable_frames as f64)),
            num(mean(&|m| m.mean_points)),
            num(mean(&|m| m.median_points)),
            num(mean(&|m| m.top15_points)),
            reached.len(),
            num(mean_time),
            num(sel.iter().map(|r| r.metrics.min_clearance_overall).fold(f64::INFINITY, f64::min)),
        );
    }
    out
}

/// Runs the batch, writing `<planner>_seed<k>.jsonl` per run, then
/// `runs.csv` and `summary.csv`.
pub fn run_experiment(spec: &RunSpec) -> Result<Summary> {
    if spec.seeds.is_empty() || spec.planners.is_empty() {
        return Err(Error::Config("a run needs at least one seed and one planner".into()));
    }
    spec.config.validate()?;
    let scenario = load_scenario(&spec.scenario_path)?;
    fs::create_dir_all(&spec.output_dir)?;
    let jobs: Vec<(PlannerKind, u64)> = spec
        .planners
        .iter()
        .flat_map(|p| spec.seeds.iter().map(move |s| (*p, *s)))
        .collect();
    let work = || -> Vec<Result<RunOutput>> {
        jobs.par_iter()
            .map(|&(p, s)| run(&scenario, p, &spec.config, s, spec.max_steps))
            .collect()
    };
    let outputs = match spec.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((planner, seed), out) in jobs.into_iter().zip(outputs) {
        match out {
            Ok(out) => {
                let path = spec.output_dir.join(format!("{planner}_seed{seed}.jsonl"));
                write_frame_log(&out.records, &path, spec.timing)?;
                rows.push(RunRow {
                    planner,
                    seed,
                    metrics: out.metrics,
                    reached: out.reached,
                });
            }
            Err(e) => failures.push((planner, seed, e.to_string())),
        }
    }
    fs::write(spec.output_dir.join("runs.csv"), runs_csv(&scenario.name, &rows))?;
    fs::write(spec.output_dir.join("summary.csv"), summary_csv(&scenario.name, &rows))?;
    if !failures.is_empty() {
        let mut report = String::from("planner,seed,error\n");
        for (p, s, e) in &failures {
            let _ = writeln!(report, "{p},{s},\"{}\"", e.replace('"', "'"));
        }
        fs::write(spec.output_dir.join("failures.csv"), report)?;
    }
    Ok(Summary { rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "format_version": 1,
  "name": "mini",
  "obstacles": [
    { "vertices_m": [[10, -1], [14, -1], [14, 1], [10, 1]] },
    { "vertices_m": [[20, 5], [22, 5]] }
  ],
  "target": {
    "vertices_m": [[30, -1], [34, -1], [34, 1], [30, 1]],
    "belief_mean_m": [32, 0],
    "belief_covariance_m2": [[1, 0], [0, 1]]
  },
  "robot_start": { "x_m": 0, "y_m": 0, "heading_rad": 0 },
  "lidar": { "ray_count": 360, "fov_rad": 6.283185307179586, "max_range_m": 40, "rate_hz": 10 },
  "max_sim_time_s": 30,
  "goal_radius_m": 3
}"#;

    #[test]
    fn two_vertex_obstacle_is_named_with_its_line() {
        match parse_scenario(MINIMAL) {
            Err(Error::InvariantViolation { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.starts_with("obstacle 1"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        assert!(matches!(parse_scenario("{\n  \"name\": }"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn round_trip() {
        let text = MINIMAL.replace("[[20, 5], [22, 5]]", "[[20, 5], [22, 5], [21, 7]]");
        let sc = parse_scenario(&text).unwrap();
        assert_eq!(sc.obstacles.len(), 2);
        let again = parse_scenario(&scenario_to_json(&sc)).unwrap();
        assert_eq!(sc, again);
    }

    #[test]
    fn numbers_are_fixed_width() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(f64::NAN), "null");
    }

    #[test]
    fn cdf_ends_at_one() {
        let rec = |p: usize| FrameRecord {
            time: 0.0,
            robot: State::new(0.0, 0.0, 0.0),
            control: crate::dynamics::Control::STOP,
            target_points: p,
            detectable: p >= 10,
            occl_estimate: 0.0,
            min_clearance: 1.0,
            solve_time: 0.0,
            iterations: 0,
            status: crate::simulator::FrameStatus::Ok,
        };
        let (cdf, _, _) = plot_tables(&[rec(3), rec(0), rec(12), rec(3)]);
        let vals: Vec<f64> = cdf.lines().skip(2).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*vals.last().unwrap(), 1.0);
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(&[], dir.path(), "x").is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
