//! File formats: model, datasets, trajectories and goal paths.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bilip::{BiLipMap, Block, OrthBlock, ResBlock};
use crate::env::EnvConfig;
use crate::error::{BiLipError, IoError};
use crate::flow::{Method, Trajectory, WaypointPath};
use crate::roadmap::{DemoTriple, LabeledDatasets};
use crate::StateVec;

/// Written into every file.
pub const FORMAT_VERSION: &str = concat!("allpairs/", env!("CARGO_PKG_VERSION"));

fn vec_of(x: &StateVec) -> Vec<f64> {
    x.iter().copied().collect()
}

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn flatten(m: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Vec<f64>, BiLipError> {
    if m.len() != r || m.iter().any(|row| row.len() != c) {
        return Err(BiLipError::InvalidModel(format!("{what} must be {r} x {c}")));
    }
    Ok(m.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BlockRecord {
    Orth {
        skew: Vec<f64>,
    },
    Res {
        tau: f64,
        #[serde(rename = "W1")]
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        #[serde(rename = "W2")]
        w2: Vec<Vec<f64>>,
        b2: Vec<f64>,
    },
}

/// Serialized planner: the map plus the constants every check needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub n: usize,
    pub blocks: Vec<BlockRecord>,
    pub out_scale: f64,
    pub shift: Vec<f64>,
    pub ball_scale: f64,
    pub lambda: f64,
    pub level_c: Option<f64>,
    pub mu: f64,
    pub nu: f64,
    pub goal: Option<Vec<f64>>,
    #[serde(default)]
    pub config: Value,
}

impl ModelFile {
    pub fn from_map(map: &BiLipMap, lambda: f64, level_c: Option<f64>, config: Value) -> Self {
        let n = crate::bilip::Diffeomorphism::dim(map);
        let blocks = map
            .blocks()
            .iter()
            .map(|b| match b {
                Block::Orth(o) => BlockRecord::Orth { skew: o.skew().to_vec() },
                Block::Res(r) => {
                    let (v1, b1, _, b2) = r.raw();
                    BlockRecord::Res {
                        tau: r.tau(),
                        w1: rows(v1, n),
                        b1: b1.to_vec(),
                        w2: rows(r.w2_effective(), r.width()),
                        b2: b2.to_vec(),
                    }
                }
            })
            .collect();
        let cert = map.cert_bounds();
        Self {
            version: FORMAT_VERSION.to_string(),
            n,
            blocks,
            out_scale: map.out_scale(),
            shift: map.shift().to_vec(),
            ball_scale: map.ball_scale(),
            lambda,
            level_c,
            mu: cert.mu,
            nu: cert.nu,
            goal: map.goal().map(|g| vec_of(&g)),
            config,
        }
    }

    /// Rebuilds the map and checks the stored bounds against the ones the
    /// parameters certify.
    pub fn to_map(&self) -> Result<BiLipMap, BiLipError> {
        let n = self.n;
        if n == 0 {
            return Err(BiLipError::InvalidModel("dimension must be positive".into()));
        }
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                BlockRecord::Orth { skew } => OrthBlock::new(n, skew.clone()).map(Block::Orth),
                BlockRecord::Res { tau, w1, b1, w2, b2 } => {
                    let width = b1.len();
                    ResBlock::from_effective(
                        n,
                        width,
                        *tau,
                        flatten(w1, width, n, "W1")?,
                        b1.clone(),
                        flatten(w2, n, width, "W2")?,
                        b2.clone(),
                    )
                    .map(Block::Res)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let map = BiLipMap::from_parts(n, blocks, self.out_scale, self.shift.clone(), self.ball_scale, self.goal.clone())?;
        let cert = map.cert_bounds();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        if !close(cert.mu, self.mu) || !close(cert.nu, self.nu) {
            return Err(BiLipError::InvalidModel(format!(
                "stored bounds (mu {}, nu {}) disagree with the parameters (mu {}, nu {})",
                self.mu, self.nu, cert.mu, cert.nu
            )));
        }
        Ok(map)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::File(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::File(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<(), IoError> {
    write_json(path, model)
}

/// Loads a model file and rebuilds its map.
pub fn load_model(path: &Path) -> Result<(ModelFile, BiLipMap), IoError> {
    let file: ModelFile = read_json(path)?;
    let map = file.to_map()?;
    Ok((file, map))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Safe,
    Unsafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x: Vec<f64>,
    pub c: f64,
    pub kind: SampleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub x: Vec<f64>,
    pub x_star: Vec<f64>,
    pub xdot: Vec<f64>,
}

/// Side file describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub version: String,
    /// Goal the labels were computed for.
    pub goal: Vec<f64>,
    #[serde(default)]
    pub env: Option<EnvConfig>,
    pub m: usize,
    pub n: usize,
    pub k_demo: usize,
    pub c_bar: f64,
    pub delta: f64,
    pub dropped_unreachable: usize,
    #[serde(default)]
    pub config: Value,
}

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const DEMOS_FILE: &str = "demos.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(|e| IoError::File(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| IoError::File(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| IoError::File(path.display().to_string(), e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let f = fs::File::open(path).map_err(|e| IoError::File(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IoError::File(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::Line(path.display().to_string(), i + 1, e))?);
    }
    Ok(out)
}

/// Writes `samples.jsonl`, `demos.jsonl` and `summary.json` into `dir`.
pub fn write_datasets(dir: &Path, data: &LabeledDatasets, summary: &DatasetSummary) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::File(dir.display().to_string(), e))?;
    let safe = data.safe.iter().map(|(x, c)| SampleRecord {
        x: vec_of(x),
        c: *c,
        kind: SampleKind::Safe,
    });
    let unsafe_ = data.unsafe_.iter().map(|(x, c)| SampleRecord {
        x: vec_of(x),
        c: *c,
        kind: SampleKind::Unsafe,
    });
    write_lines(&dir.join(SAMPLES_FILE), safe.chain(unsafe_))?;
    write_lines(
        &dir.join(DEMOS_FILE),
        data.demo.iter().map(|d| DemoRecord {
            x: vec_of(&d.x),
            x_star: vec_of(&d.x_star),
            xdot: vec_of(&d.xdot),
        }),
    )?;
    write_json(&dir.join(SUMMARY_FILE), summary)
}

/// Reads a dataset directory written by [`write_datasets`].
pub fn read_datasets(dir: &Path) -> Result<(LabeledDatasets, DatasetSummary), IoError> {
    let summary: DatasetSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let samples: Vec<SampleRecord> = read_lines(&dir.join(SAMPLES_FILE))?;
    let demo_path = dir.join(DEMOS_FILE);
    let demos: Vec<DemoRecord> = if demo_path.exists() { read_lines(&demo_path)? } else { Vec::new() };
    let mut safe = Vec::new();
    let mut unsafe_ = Vec::new();
    for s in samples {
        if s.x.is_empty() || s.x.iter().any(|v| !v.is_finite()) || !s.c.is_finite() {
            return Err(IoError::Invalid("sample coordinates and labels must be finite".into()));
        }
        let x = StateVec::from_vec(s.x);
        match s.kind {
            SampleKind::Safe => safe.push((x, s.c)),
            SampleKind::Unsafe => unsafe_.push((x, s.c)),
        }
    }
    if safe.is_empty() {
        return Err(IoError::Invalid("dataset has no safe samples".into()));
    }
    let data = LabeledDatasets {
        safe,
        unsafe_,
        c_bar: summary.c_bar,
        delta: summary.delta,
        demo: demos
            .into_iter()
            .map(|d| DemoTriple {
                x: StateVec::from_vec(d.x),
                x_star: StateVec::from_vec(d.x_star),
                xdot: StateVec::from_vec(d.xdot),
            })
            .collect(),
    };
    Ok((data, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub version: String,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_samples: Option<Vec<Vec<f64>>>,
    pub lambda: f64,
    pub method: Method,
    pub tol: f64,
    #[serde(default)]
    pub config: Value,
}

impl TrajectoryFile {
    pub fn from_trajectory(t: &Trajectory, config: Value) -> Self {
        Self {
            version: FORMAT_VERSION.to_string(),
            times: t.times.clone(),
            states: t.states.iter().map(vec_of).collect(),
            goal: vec_of(&t.goal),
            goal_samples: t.goal_samples.as_ref().map(|g| g.iter().map(vec_of).collect()),
            lambda: t.lambda,
            method: t.method,
            tol: t.tol,
            config,
        }
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.states.iter().map(|s| StateVec::from_row_slice(s)).collect(),
            goal: StateVec::from_row_slice(&self.goal),
            goal_samples: self
                .goal_samples
                .as_ref()
                .map(|g| g.iter().map(|s| StateVec::from_row_slice(s)).collect()),
            lambda: self.lambda,
            tol: self.tol,
            method: self.method,
        }
    }
}

/// Piecewise-linear goal path on disk: `{"times": [..], "points": [[..], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointFile {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl WaypointFile {
    pub fn to_path(&self) -> Result<WaypointPath, IoError> {
        WaypointPath::new(
            self.times.clone(),
            self.points.iter().map(|p| StateVec::from_row_slice(p)).collect(),
        )
        .map_err(|e| IoError::Invalid(e.to_string()))
    }
}
