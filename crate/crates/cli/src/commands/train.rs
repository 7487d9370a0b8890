use std::path::PathBuf;

use allpairs::env::make_corridor_env;
use allpairs::io::{read_datasets, save_model, write_json, ModelFile, FORMAT_VERSION};
use allpairs::train::{init_scale_from_data, train_and_calibrate, TrainConfig};
use allpairs::{BiLipConfig, BiLipMap, TrainError};
use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use super::{config_value, create_dir, point, required};
use crate::failure::Failure;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct Args {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `model.json`, `report.json` and `loss.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Cosine-decay the learning rate to this fraction of its start value.
    #[arg(long, default_value_t = 1.0)]
    pub lr_final_ratio: f64,
    /// Demonstration loss weight.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Orthogonal/residual block pairs.
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Lipschitz budget of each residual branch, in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
}

pub fn run(args: Args) -> Result<(), Failure> {
    let seed = required(&args.seed, "seed")?;
    let data_dir = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    if !(args.tau > 0.0 && args.tau < 1.0) || args.pairs == 0 || args.width == 0 {
        return Err(Failure::Input(anyhow!("need pairs >= 1, width >= 1 and tau in (0, 1)")));
    }
    let (data, summary) = read_datasets(&data_dir).map_err(Failure::input)?;
    let goal = point(&summary.goal, "dataset goal", 2)?;
    // Initialization domain: the environment's sampling region when the
    // dataset records one, the samples' bounding box otherwise.
    let (lo, hi) = match summary.env.clone().map(make_corridor_env) {
        Some(Ok(env)) => {
            let r = env.sampling_region();
            (r.min.to_vec(), r.max.to_vec())
        }
        Some(Err(e)) => return Err(Failure::input(e)),
        None => bounding_box(&data),
    };
    let arch = BiLipConfig {
        pairs: args.pairs,
        width: args.width,
        tau: args.tau,
    };
    let mut map = BiLipMap::random(&arch, &lo, &hi, seed);
    map.set_goal_center(&goal);
    init_scale_from_data(&mut map, &data, args.lambda);
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        lr_final_ratio: args.lr_final_ratio,
        rho: args.rho,
        lambda: args.lambda,
        seed: seed.wrapping_add(1),
        ..TrainConfig::default()
    };
    let (trained, report) = train_and_calibrate(&map, &data, &cfg).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Flow(_) => Failure::numerical(e),
        other => Failure::input(other),
    })?;
    create_dir(&out)?;
    let config = config_value(&args);
    let model = ModelFile::from_map(&trained, args.lambda, Some(report.level_c), config.clone());
    save_model(&out.join("model.json"), &model).map_err(Failure::input)?;
    let report_json = serde_json::json!({
        "version": FORMAT_VERSION,
        "config": config,
        "report": report,
    });
    write_json(&out.join("report.json"), &report_json).map_err(Failure::input)?;
    std::fs::write(out.join("loss.csv"), report.loss_csv()).map_err(Failure::input)?;
    log::info!(
        "trained in {:.1}s: {:.2}% safe and {:.2}% unsafe samples satisfied, level c = {:.4}, mu = {:.3e}, nu = {:.3e}",
        report.wall_clock_seconds,
        100.0 * report.safe_satisfied,
        100.0 * report.unsafe_satisfied,
        report.level_c,
        model.mu,
        model.nu
    );
    Ok(())
}

fn bounding_box(data: &allpairs::LabeledDatasets) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; 2];
    let mut hi = vec![f64::NEG_INFINITY; 2];
    for x in data.safe.iter().chain(&data.unsafe_).map(|(x, _)| x) {
        for i in 0..2 {
            lo[i] = lo[i].min(x[i]);
            hi[i] = hi[i].max(x[i]);
        }
    }
    (lo, hi)
}
