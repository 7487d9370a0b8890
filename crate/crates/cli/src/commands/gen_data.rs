use std::path::PathBuf;

use allpairs::env::corridor_v1_goal;
use allpairs::io::{write_datasets, write_json, DatasetSummary, FORMAT_VERSION};
use allpairs::roadmap::{generate_datasets, DataGenConfig};
use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use super::{config_value, create_dir, load_env, point, required};
use crate::failure::Failure;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Args {
    /// Built-in environment, used when --env is absent.
    #[arg(long, default_value = "corridor-v1")]
    pub preset: String,
    /// Environment JSON file.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Goal the cost-to-go labels point to, e.g. `1.5,1.0`. Defaults to
    /// the preset's goal.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub goal: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2500)]
    pub safe_count: usize,
    #[arg(long, default_value_t = 2500)]
    pub unsafe_count: usize,
    /// Neighbours per node in the label graph.
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// RRT step; defaults to 5% of the workspace diagonal.
    #[arg(long)]
    pub step: Option<f64>,
    /// Unsafe label margin; defaults to 10% of the largest label.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub demo_count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<(), Failure> {
    let seed = required(&args.seed, "seed")?;
    let out = required(&args.out, "out")?;
    let env = load_env(args.env.as_deref(), &args.preset)?;
    let goal = match &args.goal {
        Some(g) => point(g, "goal", 2)?,
        None if args.env.is_none() && args.preset == "corridor-v1" => corridor_v1_goal(),
        None => return Err(Failure::Input(anyhow!("--goal is required for this environment"))),
    };
    if !env.is_safe(&goal) {
        return Err(Failure::Input(anyhow!("goal unsafe: {:?} is not in the safe set", goal.as_slice())));
    }
    let cfg = DataGenConfig {
        goal: goal.iter().copied().collect(),
        safe_count: args.safe_count,
        unsafe_count: args.unsafe_count,
        k: args.k,
        step_size: args.step,
        delta: args.delta,
        demo_count: args.demo_count,
        seed,
    };
    let (data, s) = generate_datasets(&env, &cfg).map_err(Failure::input)?;
    create_dir(&out)?;
    let summary = DatasetSummary {
        version: FORMAT_VERSION.to_string(),
        goal: cfg.goal.clone(),
        env: Some(env.config()),
        m: s.m,
        n: s.n,
        k_demo: s.k_demo,
        c_bar: s.c_bar,
        delta: s.delta,
        dropped_unreachable: s.dropped_unreachable,
        config: config_value(&args),
    };
    write_datasets(&out, &data, &summary).map_err(Failure::input)?;
    write_json(&out.join("env.json"), &env.config()).map_err(Failure::input)?;
    log::info!(
        "wrote {} safe, {} unsafe, {} demo samples to {} (c_bar {:.4}, delta {:.4})",
        s.m,
        s.n,
        s.k_demo,
        out.display(),
        s.c_bar,
        s.delta
    );
    Ok(())
}
