use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use croa::io::{self, num, RunSpec};
use croa::occlusion::{draw_samples, occlusion_probability, WeightMode};
use croa::planner::{PlannerConfig, PlannerKind};
use croa::{Error, Result};

#[derive(Parser)]
#[command(name = "croa", version, about = "Occlusion-aware planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Planner configuration JSON; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One closed-loop run.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "croa")]
        planner: PlannerKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Also write plot data (CDF, timeline, trajectory).
        #[arg(long)]
        plots: bool,
        /// Include wall-clock solve times in the frame log.
        #[arg(long)]
        timing: bool,
    },
    /// Several planners over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated planner names.
        #[arg(long, default_value = "croa,tracking,pf", value_delimiter = ',')]
        planners: Vec<PlannerKind>,
        /// `a..b`, a comma list, or a single count `n` meaning `0..n`.
        #[arg(long, default_value = "20")]
        seeds: String,
        /// Output directory for runs.csv, summary.csv and the frame logs.
        #[arg(long)]
        out: PathBuf,
        /// Stop each run after this many frames.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        timing: bool,
    },
    /// Occlusion probability over a grid of robot positions.
    OcclusionField {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Grid spacing, meters.
        #[arg(long, default_value_t = 0.5)]
        resolution: f64,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a scenario (and optional config) without running it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    if s.contains(',') {
        return s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.trim().parse().map_err(|_| bad())?;
    Ok((0..n).collect())
}

fn config(common: &Common) -> Result<PlannerConfig> {
    match &common.config {
        Some(p) => io::load_config(p),
        None => Ok(PlannerConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            planner,
            seed,
            out,
            max_steps,
            plots,
            timing,
        } => {
            let cfg = config(&common)?;
            let scenario = io::load_scenario(&common.scenario)?;
            std::fs::create_dir_all(&out)?;
            let result = croa::simulator::run(&scenario, planner, &cfg, seed, max_steps)?;
            io::write_frame_log(&result.records, &out.join(format!("{planner}_seed{seed}.jsonl")), timing)?;
            let row = io::RunRow {
                planner,
                seed,
                metrics: result.metrics.clone(),
                reached: result.reached,
            };
            std::fs::write(out.join("summary.csv"), io::runs_csv(&scenario.name, std::slice::from_ref(&row)))?;
            if plots && !result.records.is_empty() {
                io::emit_plot_data(&result.records, &out, &format!("{planner}_seed{seed}"))?;
            }
            if result.records.iter().any(|r| r.status != croa::simulator::FrameStatus::Ok) {
                eprintln!("warning: some frames fell back after a solver failure");
            }
            println!(
                "{planner} seed {seed}: frames {} occlusion ratio {:.3} mean points {:.1} reached {}",
                result.metrics.total_frames,
                result.metrics.occlusion_ratio,
                result.metrics.mean_points,
                result.metrics.time_to_target.map_or("no".to_string(), |t| format!("at {t:.1} s")),
            );
            Ok(())
        }
        Command::Compare {
            common,
            planners,
            seeds,
            out,
            max_steps,
            threads,
            timing,
        } => {
            let spec = RunSpec {
                scenario_path: common.scenario.clone(),
                planners,
                seeds: parse_seeds(&seeds)?,
                config: config(&common)?,
                output_dir: out.clone(),
                max_steps,
                threads,
                timing,
            };
            let summary = io::run_experiment(&spec)?;
            print!("{}", std::fs::read_to_string(out.join("summary.csv"))?);
            for (p, s, e) in &summary.failures {
                eprintln!("failed: {p} seed {s}: {e}");
            }
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(Error::SolverFailure(format!("{} runs failed", summary.failures.len())))
            }
        }
        Command::OcclusionField {
            common,
            out,
            resolution,
            samples,
            seed,
        } => {
            if !(resolution > 0.0) {
                return Err(Error::Config("resolution must be positive".into()));
            }
            let sc = io::load_scenario(&common.scenario)?;
            let set = draw_samples(&sc.target_belief, samples, seed, WeightMode::Uniform)?;
            let mut lo = sc.robot_start.position();
            let mut hi = lo;
            for o in sc.obstacles.iter().chain(std::iter::once(&sc.target_truth)) {
                for v in o.vertices() {
                    lo = lo.inf(v);
                    hi = hi.sup(v);
                }
            }
            let pad = 5.0;
            let nx = ((hi.x - lo.x + 2.0 * pad) / resolution).ceil() as usize + 1;
            let ny = ((hi.y - lo.y + 2.0 * pad) / resolution).ceil() as usize + 1;
            let mut body = format!("# format_version {}\nx_m,y_m,occlusion_probability\n", io::FORMAT_VERSION);
            for j in 0..ny {
                for i in 0..nx {
                    let p = croa::geometry::Point2::new(lo.x - pad + i as f64 * resolution, lo.y - pad + j as f64 * resolution);
                    let _ = writeln!(body, "{},{},{}", num(p.x), num(p.y), num(occlusion_probability(&p, &set, &sc.geoms)));
                }
            }
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(&out, body)?;
            Ok(())
        }
        Command::Validate { common } => {
            let cfg = config(&common)?;
            let sc = io::load_scenario(&common.scenario)?;
            let issues = sc.check(cfg.d0);
            if let Some(first) = issues.first() {
                return Err(Error::InvariantViolation { line: 0, msg: first.clone() });
            }
            println!("{}: ok ({} obstacles)", sc.name, sc.obstacles.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::InvariantViolation { .. } | Error::Config(_) | Error::DegenerateInput(_) => ExitCode::from(2),
                Error::SolverFailure(_) | Error::InfeasibleStart => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
