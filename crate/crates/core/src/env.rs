//! Planar workspace with rectangle and circle obstacles.
//!
//! The safe set is the closure of the workspace minus the obstacle
//! interiors: points on an obstacle edge or on the workspace boundary are
//! safe. All geometric predicates are exact (no sampling).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::StateVec;

/// Flood-fill resolution used to validate connectivity of the safe set.
pub const CONNECTIVITY_GRID: usize = 256;

/// Consecutive rejections tolerated by the samplers before giving up.
pub const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn inflate(&self, margin: f64) -> Rect {
        Rect {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    fn intersects_closed(&self, other: &Rect) -> bool {
        (0..2).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    /// True iff the closed segment `a + t (b - a)`, `t in [0, 1]`, meets the
    /// open interior of the rectangle.
    fn segment_hits_interior(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for k in 0..2 {
            let d = b[k] - a[k];
            if d == 0.0 {
                if !(a[k] > self.min[k] && a[k] < self.max[k]) {
                    return false;
                }
            } else {
                let t1 = (self.min[k] - a[k]) / d;
                let t2 = (self.max[k] - a[k]) / d;
                lo = lo.max(t1.min(t2));
                hi = hi.min(t1.max(t2));
            }
        }
        // Open interval (lo, hi) must be nonempty and overlap [0, 1].
        lo < hi && lo < 1.0 && hi > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Obstacle {
    Rect { min: [f64; 2], max: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
}

impl Obstacle {
    pub fn rect(min: [f64; 2], max: [f64; 2]) -> Self {
        Obstacle::Rect { min, max }
    }

    pub fn circle(center: [f64; 2], radius: f64) -> Self {
        Obstacle::Circle { center, radius }
    }

    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        match *self {
            Obstacle::Rect { min, max } => Rect { min, max }.contains_open(p),
            Obstacle::Circle { center, radius } => {
                (p[0] - center[0]).hypot(p[1] - center[1]) < radius
            }
        }
    }

    pub fn segment_hits_interior(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        match *self {
            Obstacle::Rect { min, max } => Rect { min, max }.segment_hits_interior(a, b),
            Obstacle::Circle { center, radius } => {
                segment_point_distance(a, b, center) < radius
            }
        }
    }

    fn bounding_rect(&self) -> Rect {
        match *self {
            Obstacle::Rect { min, max } => Rect { min, max },
            Obstacle::Circle { center, radius } => Rect {
                min: [center[0] - radius, center[1] - radius],
                max: [center[0] + radius, center[1] + radius],
            },
        }
    }

    fn intersects_rect(&self, r: &Rect) -> bool {
        match *self {
            Obstacle::Rect { .. } => self.bounding_rect().intersects_closed(r),
            Obstacle::Circle { center, radius } => {
                let cx = center[0].clamp(r.min[0], r.max[0]);
                let cy = center[1].clamp(r.min[1], r.max[1]);
                (cx - center[0]).hypot(cy - center[1]) <= radius
            }
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Obstacle::Rect { min, max } => {
                min.iter().chain(max.iter()).all(|v| v.is_finite())
                    && min[0] < max[0]
                    && min[1] < max[1]
            }
            Obstacle::Circle { center, radius } => {
                center.iter().all(|v| v.is_finite()) && radius.is_finite() && radius > 0.0
            }
        }
    }
}

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn segment_point_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Construction input for [`Environment`]; also its JSON representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub workspace: Rect,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Width of the exterior ring sampled as unsafe. `None` selects 20% of
    /// the workspace diagonal.
    #[serde(default)]
    pub boundary_margin: Option<f64>,
}

/// Validated planar environment. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    workspace: Rect,
    obstacles: Vec<Obstacle>,
    boundary_margin: f64,
}

impl<'de> Deserialize<'de> for Environment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let cfg = EnvConfig::deserialize(d)?;
        make_corridor_env(cfg).map_err(serde::de::Error::custom)
    }
}

/// Builds and validates an environment.
pub fn make_corridor_env(cfg: EnvConfig) -> Result<Environment, EnvError> {
    let ws = cfg.workspace;
    let finite = ws.min.iter().chain(ws.max.iter()).all(|v| v.is_finite());
    if !finite || ws.area() <= 0.0 {
        return Err(EnvError::EmptyWorkspace);
    }
    for (i, obs) in cfg.obstacles.iter().enumerate() {
        if !obs.is_valid() {
            return Err(EnvError::InvalidObstacle(i));
        }
        if !obs.intersects_rect(&ws) {
            return Err(EnvError::ObstacleOutsideWorkspace(i));
        }
    }
    let boundary_margin = cfg.boundary_margin.unwrap_or(0.2 * ws.diagonal());
    if !(boundary_margin.is_finite() && boundary_margin >= 0.0) {
        return Err(EnvError::InvalidMargin(boundary_margin));
    }
    let env = Environment {
        workspace: ws,
        obstacles: cfg.obstacles,
        boundary_margin,
    };
    let components = env.safe_components(CONNECTIVITY_GRID);
    if components != 1 {
        return Err(EnvError::Disconnected { components });
    }
    Ok(env)
}

impl Environment {
    /// Built-in presets by name.
    pub fn preset(name: &str) -> Result<Environment, EnvError> {
        match name {
            "corridor-v1" => make_corridor_env(corridor_v1()),
            "empty" | "unit-square" => make_corridor_env(EnvConfig {
                workspace: Rect::new([0.0, 0.0], [1.0, 1.0]),
                obstacles: vec![],
                boundary_margin: None,
            }),
            other => Err(EnvError::UnknownPreset(other.to_string())),
        }
    }

    pub fn workspace(&self) -> &Rect {
        &self.workspace
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn boundary_margin(&self) -> f64 {
        self.boundary_margin
    }

    /// Workspace inflated by the boundary margin; support of the unsafe sampler.
    pub fn sampling_region(&self) -> Rect {
        self.workspace.inflate(self.boundary_margin)
    }

    pub fn config(&self) -> EnvConfig {
        EnvConfig {
            workspace: self.workspace,
            obstacles: self.obstacles.clone(),
            boundary_margin: Some(self.boundary_margin),
        }
    }

    pub fn is_safe_xy(&self, p: [f64; 2]) -> bool {
        p[0].is_finite()
            && p[1].is_finite()
            && self.workspace.contains_closed(p)
            && !self.obstacles.iter().any(|o| o.contains_open(p))
    }

    pub fn is_safe(&self, x: &StateVec) -> bool {
        x.len() == 2 && self.is_safe_xy([x[0], x[1]])
    }

    /// Exact test that no point of the closed segment `[a, b]` is unsafe.
    pub fn segment_free(&self, a: &StateVec, b: &StateVec) -> bool {
        if a.len() != 2 || b.len() != 2 {
            return false;
        }
        let (a, b) = ([a[0], a[1]], [b[0], b[1]]);
        // The workspace is convex, so containing both ends suffices.
        self.is_safe_xy(a)
            && self.is_safe_xy(b)
            && !self.obstacles.iter().any(|o| o.segment_hits_interior(a, b))
    }

    pub fn sample_safe(&self, count: usize, seed: u64) -> Result<Vec<StateVec>, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.rejection_sample(count, &self.workspace, &mut rng, |p| self.is_safe_xy(p))
    }

    pub fn sample_unsafe(&self, count: usize, seed: u64) -> Result<Vec<StateVec>, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let region = self.sampling_region();
        self.rejection_sample(count, &region, &mut rng, |p| !self.is_safe_xy(p))
    }

    fn rejection_sample<R: Rng>(
        &self,
        count: usize,
        region: &Rect,
        rng: &mut R,
        accept: impl Fn([f64; 2]) -> bool,
    ) -> Result<Vec<StateVec>, EnvError> {
        if count == 0 {
            return Err(EnvError::ZeroCount);
        }
        let mut out = Vec::with_capacity(count);
        let mut rejections = 0usize;
        while out.len() < count {
            let p = [
                rng.gen_range(region.min[0]..=region.max[0]),
                rng.gen_range(region.min[1]..=region.max[1]),
            ];
            if accept(p) {
                out.push(StateVec::from_row_slice(&p));
                rejections = 0;
            } else {
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Err(EnvError::SamplingExhausted(MAX_REJECTIONS));
                }
            }
        }
        Ok(out)
    }

    /// Number of 4-connected components of safe cell centres on a
    /// `res x res` grid over the workspace.
    pub fn safe_components(&self, res: usize) -> usize {
        let ws = &self.workspace;
        let dx = (ws.max[0] - ws.min[0]) / res as f64;
        let dy = (ws.max[1] - ws.min[1]) / res as f64;
        let safe: Vec<bool> = (0..res * res)
            .map(|idx| {
                let (i, j) = (idx % res, idx / res);
                let p = [
                    ws.min[0] + (i as f64 + 0.5) * dx,
                    ws.min[1] + (j as f64 + 0.5) * dy,
                ];
                self.is_safe_xy(p)
            })
            .collect();
        let mut seen = vec![false; res * res];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..res * res {
            if !safe[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(idx) = queue.pop_front() {
                let (i, j) = (idx % res, idx / res);
                let mut visit = |ni: usize, nj: usize| {
                    let n = nj * res + ni;
                    if safe[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                };
                if i > 0 {
                    visit(i - 1, j);
                }
                if i + 1 < res {
                    visit(i + 1, j);
                }
                if j > 0 {
                    visit(i, j - 1);
                }
                if j + 1 < res {
                    visit(i, j + 1);
                }
            }
        }
        components
    }
}

/// Two staggered walls forming an S-shaped corridor in a 3 x 2 workspace.
pub fn corridor_v1() -> EnvConfig {
    EnvConfig {
        workspace: Rect::new([0.0, 0.0], [3.0, 2.0]),
        obstacles: vec![
            Obstacle::rect([0.9, 0.0], [1.2, 1.2]),
            Obstacle::rect([1.8, 0.8], [2.1, 2.0]),
        ],
        boundary_margin: None,
    }
}

/// Default goal used by the corridor pipeline; lies in the middle chamber.
pub fn corridor_v1_goal() -> StateVec {
    StateVec::from_row_slice(&[1.5, 1.0])
}
