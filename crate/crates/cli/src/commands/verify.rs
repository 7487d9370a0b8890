use std::path::PathBuf;

use allpairs::io::{load_model, write_json, FORMAT_VERSION};
use allpairs::verify::{run_suite, CertificateReport, SuiteConfig};
use allpairs::FlowError;
use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use super::{config_value, load_env, required};
use crate::failure::Failure;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Args {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Environment file for the true-environment safety report.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Preset used when --env is absent; `none` skips the environment.
    #[arg(long, default_value = "none")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the model's lambda.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub bilip_pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub inverse_samples: usize,
    #[arg(long, default_value_t = 10_000)]
    pub barrier_samples: usize,
    #[arg(long, default_value_t = 1_000)]
    pub exterior_samples: usize,
    #[arg(long, default_value_t = 10)]
    pub goals: usize,
    #[arg(long, default_value_t = 100)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    /// Skip the shear-map counterexample search.
    #[arg(long)]
    pub skip_example1: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    version: &'static str,
    config: serde_json::Value,
    pass: bool,
    checks: &'a [CertificateReport],
}

pub fn run(args: Args) -> Result<(), Failure> {
    let model_path = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    let (file, map) = load_model(&model_path).map_err(Failure::input)?;
    let env = match (&args.env, args.preset.as_str()) {
        (None, "none") => None,
        (env, preset) => Some(load_env(env.as_deref(), preset)?),
    };
    let lambda = args.lambda.unwrap_or(file.lambda);
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Failure::Input(anyhow!("lambda must be positive")));
    }
    if [args.bilip_pairs, args.inverse_samples, args.barrier_samples, args.goals, args.rollouts, args.grid]
        .contains(&0)
    {
        return Err(Failure::Input(anyhow!("sample counts must be positive")));
    }
    let mut cfg = SuiteConfig::full(lambda, args.seed);
    cfg.bilip_pairs = args.bilip_pairs;
    cfg.inverse_samples = args.inverse_samples;
    cfg.barrier_samples = args.barrier_samples;
    cfg.exterior_samples = args.exterior_samples;
    cfg.goals = args.goals;
    cfg.rollouts = args.rollouts;
    cfg.grid_per_side = args.grid;
    cfg.example1 = !args.skip_example1;
    let outcome = run_suite(&map, env.as_ref(), &cfg).map_err(|e| match e {
        FlowError::InvalidArgument(_) => Failure::input(e),
        other => Failure::numerical(other),
    })?;
    for r in &outcome.reports {
        log::info!("{}", r.summary_line());
    }
    let pass = outcome.all_ok();
    let record = ReportFile {
        version: FORMAT_VERSION,
        config: config_value(&args),
        pass,
        checks: &outcome.reports,
    };
    write_json(&out, &record).map_err(Failure::input)?;
    if pass {
        Ok(())
    } else {
        let failed: Vec<&str> = outcome.reports.iter().filter(|r| !r.ok()).map(|r| r.name.as_str()).collect();
        Err(Failure::Check(format!("failed checks: {}", failed.join(", "))))
    }
}
