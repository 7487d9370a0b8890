pub mod gen_data;
pub mod plan;
pub mod plots;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use allpairs::env::Environment;
use allpairs::io::read_json;
use allpairs::StateVec;
use anyhow::{anyhow, Context};

use crate::failure::Failure;

/// Environment from `--env FILE`, falling back to `--preset NAME`.
pub fn load_env(env: Option<&Path>, preset: &str) -> Result<Environment, Failure> {
    match env {
        Some(p) => read_json::<Environment>(p)
            .with_context(|| format!("loading environment {}", p.display()))
            .map_err(Failure::Input),
        None => Environment::preset(preset).map_err(Failure::input),
    }
}

pub fn point(v: &[f64], what: &str, dim: usize) -> Result<StateVec, Failure> {
    if v.len() != dim {
        return Err(Failure::Input(anyhow!("{what} needs {dim} coordinates, got {}", v.len())));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Failure::Input(anyhow!("{what} must be finite")));
    }
    Ok(StateVec::from_row_slice(v))
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, Failure> {
    v.clone().ok_or_else(|| Failure::Input(anyhow!("--{flag} is required")))
}

pub fn create_dir(dir: &PathBuf) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Input)
}

pub fn config_value<T: serde::Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("argument structs serialize")
}
