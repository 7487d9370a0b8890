use std::path::PathBuf;

use allpairs::bilip::Diffeomorphism;
use allpairs::env::Obstacle;
use allpairs::io::{load_model, read_datasets, read_json, write_json, TrajectoryFile, FORMAT_VERSION};
use allpairs::StateVec;
use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use super::{config_value, create_dir, load_env, required};
use crate::failure::Failure;
use crate::plot::{marching_squares, Grid, Polyline, Svg};

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Args {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trajectory files written by `plan`; one polyline each.
    #[arg(long = "trajectory")]
    pub trajectories: Vec<PathBuf>,
    /// Dataset directory; enables cost-to-go contours.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Preset used when --env is absent; `none` plots without obstacles.
    #[arg(long, default_value = "corridor-v1")]
    pub preset: String,
    /// Grid resolution per side for boundary and contour tracing.
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    #[arg(long, default_value_t = 8)]
    pub contour_levels: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Contour {
    level: f64,
    lines: Vec<Polyline>,
}

#[derive(Serialize)]
struct PlotData {
    version: &'static str,
    config: serde_json::Value,
    bounds: [[f64; 2]; 2],
    boundary: Vec<Polyline>,
    contours: Vec<Contour>,
    trajectories: Vec<Polyline>,
    z_trajectories: Vec<Polyline>,
}

fn xy(x: &StateVec) -> [f64; 2] {
    [x[0], x[1]]
}

pub fn run(args: Args) -> Result<(), Failure> {
    let model_path = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    if args.resolution < 3 {
        return Err(Failure::Input(anyhow!("resolution must be at least 3")));
    }
    let (_, map) = load_model(&model_path).map_err(Failure::input)?;
    if map.dim() != 2 {
        return Err(Failure::Input(anyhow!("plots need a planar model, got dimension {}", map.dim())));
    }
    let env = match (&args.env, args.preset.as_str()) {
        (None, "none") => None,
        (env, preset) => Some(load_env(env.as_deref(), preset)?),
    };
    let trajectories = args
        .trajectories
        .iter()
        .map(|p| {
            read_json::<TrajectoryFile>(p)
                .with_context(|| format!("loading trajectory {}", p.display()))
                .map(|f| f.to_trajectory())
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Input)?;
    if trajectories.iter().any(|t| t.states.iter().any(|x| x.len() != 2)) {
        return Err(Failure::Input(anyhow!("trajectories must be planar")));
    }
    let data = args
        .data
        .as_deref()
        .map(read_datasets)
        .transpose()
        .map_err(Failure::input)?;

    let (lo, hi) = match &env {
        Some(e) => {
            let r = e.sampling_region();
            (r.min, r.max)
        }
        None => {
            let pts: Vec<StateVec> = trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect();
            let pts = if pts.is_empty() {
                vec![map.inverse(&StateVec::from_element(2, 0.0), 1e-9, 200).map_err(Failure::numerical)?]
            } else {
                pts
            };
            let (lo, hi) = allpairs::verify::padded_bounds(&pts, 0.5);
            ([lo[0], lo[1]], [hi[0], hi[1]])
        }
    };
    let res = args.resolution;
    let z_norm = Grid::sample(lo, hi, res, res, |p| map.forward(&StateVec::from_row_slice(&p)).norm());
    let boundary = marching_squares(&z_norm, 1.0);

    let contours = match &data {
        Some((d, _)) if args.contour_levels > 0 => {
            let samples: Vec<([f64; 2], f64)> = d.safe.iter().map(|(x, c)| (xy(x), *c)).collect();
            let cost = Grid::sample(lo, hi, res, res, |p| {
                if env.as_ref().is_some_and(|e| !e.is_safe_xy(p)) {
                    return f64::NAN;
                }
                samples
                    .iter()
                    .min_by(|a, b| dist2(a.0, p).total_cmp(&dist2(b.0, p)))
                    .map_or(f64::NAN, |s| s.1)
            });
            let c_max = samples.iter().map(|s| s.1).fold(0.0, f64::max);
            (1..=args.contour_levels)
                .map(|k| {
                    let level = c_max * k as f64 / (args.contour_levels + 1) as f64;
                    Contour { level, lines: marching_squares(&cost, level) }
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let paths: Vec<Polyline> = trajectories.iter().map(|t| t.states.iter().map(xy).collect()).collect();
    let z_paths: Vec<Polyline> = trajectories
        .iter()
        .map(|t| t.states.iter().map(|x| xy(&map.forward(x))).collect())
        .collect();

    let mut ws = Svg::new(lo, hi, 900.0);
    if let Some(e) = &env {
        ws.rect(e.workspace().min, e.workspace().max, "workspace");
        for o in e.obstacles() {
            match *o {
                Obstacle::Rect { min, max } => ws.rect(min, max, "obstacle"),
                Obstacle::Circle { center, radius } => ws.circle(center, radius, "obstacle"),
            }
        }
    }
    for c in &contours {
        ws.path(&c.lines, "contour");
    }
    ws.path(&boundary, "boundary");
    for (p, t) in paths.iter().zip(&trajectories) {
        ws.polyline(p, "trajectory");
        ws.circle(xy(&t.goal), 0.01 * (hi[0] - lo[0]), "goal");
    }

    let mut zs = Svg::new([-1.2, -1.2], [1.2, 1.2], 600.0);
    zs.circle([0.0, 0.0], 1.0, "ball");
    for (p, t) in z_paths.iter().zip(&trajectories) {
        zs.polyline(p, "trajectory");
        zs.circle(xy(&map.forward(&t.goal)), 0.02, "goal");
    }

    create_dir(&out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Input)
    };
    write("workspace.svg", ws.finish())?;
    write("zspace.svg", zs.finish())?;
    let record = PlotData {
        version: FORMAT_VERSION,
        config: config_value(&args),
        bounds: [lo, hi],
        boundary,
        contours,
        trajectories: paths,
        z_trajectories: z_paths,
    };
    write_json(&out.join("plot_data.json"), &record).map_err(Failure::input)?;
    log::info!("wrote plots for {} trajectories to {}", trajectories.len(), out.display());
    Ok(())
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}
