use std::path::PathBuf;

use allpairs::bilip::Diffeomorphism;
use allpairs::flow::{
    rollout_analytic, rollout_finite_time, rollout_gradient_flow, rollout_rk4, tracking_rollout, FlowConfig,
};
use allpairs::io::{load_model, read_json, write_json, TrajectoryFile, WaypointFile};
use allpairs::FlowError;
use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use super::{config_value, point, required};
use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMethod {
    Analytic,
    Rk4,
    FiniteTime,
    GradientBaseline,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Args {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
    /// Fixed goal. Mutually exclusive with --goal-path.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub goal: Option<Vec<f64>>,
    /// Waypoint file `{"times": [..], "points": [[..], ..]}` for a moving goal;
    /// integrated with RK4.
    #[arg(long)]
    pub goal_path: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "analytic")]
    pub method: PlanMethod,
    /// Horizon; defaults to 5 / lambda.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Sample count for analytic rollouts.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// RK4 step; defaults to min(0.01, 0.1 / lambda).
    #[arg(long)]
    pub h: Option<f64>,
    /// Overrides the model's lambda.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn flow_failure(e: FlowError) -> Failure {
    match e {
        FlowError::InvalidArgument(_) => Failure::input(e),
        other => Failure::numerical(other),
    }
}

pub fn run(args: Args) -> Result<(), Failure> {
    let model_path = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    let (file, map) = load_model(&model_path).map_err(Failure::input)?;
    let n = map.dim();
    let start = point(&required(&args.start, "start")?, "start", n)?;
    let lambda = args.lambda.unwrap_or(file.lambda);
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Failure::Input(anyhow!("lambda must be positive")));
    }
    let mut cfg = FlowConfig::new(lambda);
    if let Some(h) = args.h {
        cfg = cfg.with_step(h);
    }
    let t_end = args.t_end.unwrap_or(5.0 / lambda);
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Failure::Input(anyhow!("t-end must be positive")));
    }
    warn_outside("start", map.forward(&start).norm());
    let traj = match (&args.goal, &args.goal_path) {
        (Some(_), Some(_)) => return Err(Failure::Input(anyhow!("give either --goal or --goal-path"))),
        (None, None) => return Err(Failure::Input(anyhow!("--goal or --goal-path is required"))),
        (None, Some(path)) => {
            if args.method != PlanMethod::Rk4 && args.method != PlanMethod::Analytic {
                return Err(Failure::Input(anyhow!("moving goals support only the natural field")));
            }
            let wf: WaypointFile = read_json(path).map_err(Failure::input)?;
            let gp = wf.to_path().map_err(Failure::input)?;
            if gp.points.iter().any(|p| p.len() != n) {
                return Err(Failure::Input(anyhow!("waypoints must have {n} coordinates")));
            }
            for p in &gp.points {
                warn_outside("goal path", map.forward(p).norm());
            }
            log::info!("goal path speed bound b = {:.4}", gp.max_speed());
            tracking_rollout(&map, &start, &gp, t_end, &cfg).map_err(flow_failure)?
        }
        (Some(g), None) => {
            let goal = point(g, "goal", n)?;
            warn_outside("goal", map.forward(&goal).norm());
            match args.method {
                PlanMethod::Analytic => {
                    let m = args.samples.max(2);
                    let times: Vec<f64> = (0..m).map(|i| t_end * i as f64 / (m - 1) as f64).collect();
                    rollout_analytic(&map, &start, &goal, &cfg, &times)
                }
                PlanMethod::Rk4 => rollout_rk4(&map, &start, &goal, t_end, &cfg),
                PlanMethod::FiniteTime => rollout_finite_time(&map, &start, &goal, t_end, &cfg),
                PlanMethod::GradientBaseline => rollout_gradient_flow(&map, &start, &goal, t_end, &cfg),
            }
            .map_err(flow_failure)?
        }
    };
    let record = TrajectoryFile::from_trajectory(&traj, config_value(&args));
    write_json(&out, &record).map_err(Failure::input)?;
    let last = traj.states.last().expect("nonempty trajectory");
    log::info!(
        "wrote {} samples to {}; final error {:.3e}",
        traj.len(),
        out.display(),
        (last - &traj.goal).norm()
    );
    Ok(())
}

fn warn_outside(what: &str, z_norm: f64) {
    if z_norm > 1.0 {
        log::warn!("{what} lies outside the learned safe set (|g| = {z_norm:.4}); convergence holds, safety does not");
    }
}
