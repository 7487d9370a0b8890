//! Cost-to-go labels over a sample graph.
//!
//! An RRT grown from the goal supplies coverage of the safe set; labels
//! are then shortest-path distances on a k-nearest-neighbour visibility
//! graph over those nodes, which are tighter than tree-path distances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::RoadmapError;
use crate::StateVec;

#[derive(Debug, Clone)]
pub struct Roadmap {
    pub nodes: Vec<StateVec>,
    /// Undirected edges `(i, j, length)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub root_index: usize,
}

impl Roadmap {
    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        adj
    }
}

/// Grows an RRT rooted at `root` until it holds `node_count` nodes.
pub fn rrt_grow(
    env: &Environment,
    root: &StateVec,
    node_count: usize,
    step_size: f64,
    seed: u64,
) -> Result<Vec<StateVec>, RoadmapError> {
    if !env.is_safe(root) {
        return Err(RoadmapError::UnsafeRoot(root.iter().copied().collect()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(RoadmapError::InvalidParameter("step_size must be positive"));
    }
    if node_count == 0 {
        return Err(RoadmapError::InvalidParameter("node_count must be at least 1"));
    }
    let ws = *env.workspace();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![root.clone()];
    let max_iter = 100 * node_count;
    let mut iter = 0;
    while nodes.len() < node_count {
        if iter >= max_iter {
            return Err(RoadmapError::RrtStalled {
                reached: nodes.len(),
                requested: node_count,
                iterations: max_iter,
            });
        }
        iter += 1;
        let target = StateVec::from_row_slice(&[
            rng.gen_range(ws.min[0]..=ws.max[0]),
            rng.gen_range(ws.min[1]..=ws.max[1]),
        ]);
        let nearest = nodes
            .iter()
            .min_by(|a, b| {
                (*a - &target)
                    .norm_squared()
                    .total_cmp(&(*b - &target).norm_squared())
            })
            .expect("tree is never empty");
        let dir = &target - nearest;
        let dist = dir.norm();
        if dist == 0.0 {
            continue;
        }
        let new = if dist <= step_size {
            target
        } else {
            nearest + dir * (step_size / dist)
        };
        if env.segment_free(nearest, &new) {
            nodes.push(new);
        }
    }
    Ok(nodes)
}

/// Links each node to its `k` nearest neighbours where the straight segment
/// is collision free. Node 0 is the root.
pub fn build_knn_graph(
    env: &Environment,
    nodes: &[StateVec],
    k: usize,
) -> Result<Roadmap, RoadmapError> {
    if k == 0 {
        return Err(RoadmapError::InvalidParameter("k must be at least 1"));
    }
    if nodes.is_empty() {
        return Err(RoadmapError::InvalidParameter("nodes must be nonempty"));
    }
    let n = nodes.len();
    let mut edges = Vec::new();
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| ((&nodes[i] - &nodes[j]).norm(), j)),
        );
        let kk = k.min(dists.len());
        if kk == 0 {
            continue;
        }
        dists.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &dists[..kk] {
            if env.segment_free(&nodes[i], &nodes[j]) {
                edges.push((i.min(j), i.max(j), d));
            }
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    Ok(Roadmap {
        nodes: nodes.to_vec(),
        edges,
        root_index: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostToGo {
    /// `Some(distance)` for reachable nodes, `None` for dropped ones.
    pub labels: Vec<Option<f64>>,
    pub unreachable: usize,
}

impl CostToGo {
    /// Reachable `(node, label)` pairs in node order.
    pub fn reachable<'a>(&'a self, nodes: &'a [StateVec]) -> impl Iterator<Item = (&'a StateVec, f64)> {
        nodes
            .iter()
            .zip(&self.labels)
            .filter_map(|(x, c)| c.map(|c| (x, c)))
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra distances from the root. Unreachable nodes are reported and
/// dropped; more than half unreachable is an error.
pub fn cost_to_go(roadmap: &Roadmap) -> Result<CostToGo, RoadmapError> {
    let n = roadmap.nodes.len();
    if roadmap.root_index >= n {
        return Err(RoadmapError::BadRoot(roadmap.root_index));
    }
    let adj = roadmap.adjacency();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[roadmap.root_index] = 0.0;
    heap.push(HeapItem(0.0, roadmap.root_index));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem(nd, v));
            }
        }
    }
    let unreachable = dist.iter().filter(|d| d.is_infinite()).count();
    if 2 * unreachable > n {
        return Err(RoadmapError::TooSparse { unreachable, total: n });
    }
    if unreachable > 0 {
        log::warn!("dropping {unreachable} of {n} roadmap nodes unreachable from the root");
    }
    Ok(CostToGo {
        labels: dist.into_iter().map(|d| d.is_finite().then_some(d)).collect(),
        unreachable,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTriple {
    pub x: StateVec,
    pub x_star: StateVec,
    pub xdot: StateVec,
}

/// Training sets: safe points with per-sample levels, unsafe points sharing
/// the level `c_bar + delta`, and optional demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDatasets {
    pub safe: Vec<(StateVec, f64)>,
    pub unsafe_: Vec<(StateVec, f64)>,
    pub c_bar: f64,
    pub delta: f64,
    pub demo: Vec<DemoTriple>,
}

impl LabeledDatasets {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.safe.len(), self.unsafe_.len(), self.demo.len())
    }

    pub fn unsafe_level(&self) -> f64 {
        self.c_bar + self.delta
    }
}

/// Pairs safe samples with their labels and assigns `c_bar + delta` to
/// every unsafe sample.
pub fn assemble_datasets(
    labeled: Vec<(StateVec, f64)>,
    unsafe_points: Vec<StateVec>,
    delta: f64,
) -> Result<LabeledDatasets, RoadmapError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(RoadmapError::InvalidParameter("delta must be positive"));
    }
    if labeled.is_empty() {
        return Err(RoadmapError::InvalidParameter("labels must be nonempty"));
    }
    if labeled.iter().any(|(_, c)| !(c.is_finite() && *c >= 0.0)) {
        return Err(RoadmapError::InvalidParameter("labels must be finite and nonnegative"));
    }
    let c_bar = labeled.iter().map(|(_, c)| *c).fold(f64::NEG_INFINITY, f64::max);
    if unsafe_points.is_empty() {
        log::warn!("no unsafe samples: the separation loss has no outer constraint");
    }
    let level = c_bar + delta;
    Ok(LabeledDatasets {
        safe: labeled,
        unsafe_: unsafe_points.into_iter().map(|x| (x, level)).collect(),
        c_bar,
        delta,
        demo: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub goal: Vec<f64>,
    pub safe_count: usize,
    pub unsafe_count: usize,
    pub k: usize,
    /// RRT step; `None` selects 5% of the workspace diagonal.
    pub step_size: Option<f64>,
    /// Unsafe margin; `None` selects 10% of `c_bar`, or 1% of the workspace
    /// diagonal when every label is zero.
    pub delta: Option<f64>,
    pub demo_count: usize,
    pub seed: u64,
}

impl DataGenConfig {
    pub fn full_scale(goal: &StateVec, seed: u64) -> Self {
        Self {
            goal: goal.iter().copied().collect(),
            safe_count: 2500,
            unsafe_count: 2500,
            k: 10,
            step_size: None,
            delta: None,
            demo_count: 0,
            seed,
        }
    }
}

/// Summary of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenSummary {
    pub m: usize,
    pub n: usize,
    pub k_demo: usize,
    pub c_bar: f64,
    pub delta: f64,
    pub dropped_unreachable: usize,
}

/// Full label pipeline: RRT, k-NN graph, Dijkstra, unsafe sampling.
///
/// Demonstrations, when requested, follow the shortest-path tree towards the
/// root at unit speed: `xdot` points from a node to its Dijkstra parent.
pub fn generate_datasets(
    env: &Environment,
    cfg: &DataGenConfig,
) -> Result<(LabeledDatasets, DataGenSummary), RoadmapError> {
    let root = StateVec::from_row_slice(&cfg.goal);
    let step = cfg.step_size.unwrap_or(0.05 * env.workspace().diagonal());
    let nodes = rrt_grow(env, &root, cfg.safe_count, step, cfg.seed)?;
    let roadmap = build_knn_graph(env, &nodes, cfg.k)?;
    let ctg = cost_to_go(&roadmap)?;
    let labeled: Vec<(StateVec, f64)> = ctg
        .reachable(&roadmap.nodes)
        .map(|(x, c)| (x.clone(), c))
        .collect();
    let c_bar = labeled.iter().map(|(_, c)| *c).fold(0.0, f64::max);
    // A lone root has c_bar = 0; fall back to a length scale of the workspace.
    let delta = cfg.delta.unwrap_or(if c_bar > 0.0 { 0.1 * c_bar } else { 0.01 * env.workspace().diagonal() });
    let unsafe_points = if cfg.unsafe_count > 0 {
        env.sample_unsafe(cfg.unsafe_count, cfg.seed.wrapping_add(1))
            .map_err(|_| RoadmapError::InvalidParameter("could not sample unsafe points"))?
    } else {
        Vec::new()
    };
    let mut data = assemble_datasets(labeled, unsafe_points, delta)?;
    if cfg.demo_count > 0 {
        data.demo = shortest_path_demos(&roadmap, &ctg, cfg.demo_count, cfg.seed.wrapping_add(2));
    }
    let summary = DataGenSummary {
        m: data.safe.len(),
        n: data.unsafe_.len(),
        k_demo: data.demo.len(),
        c_bar: data.c_bar,
        delta: data.delta,
        dropped_unreachable: ctg.unreachable,
    };
    Ok((data, summary))
}

fn shortest_path_demos(roadmap: &Roadmap, ctg: &CostToGo, count: usize, seed: u64) -> Vec<DemoTriple> {
    let adj = roadmap.adjacency();
    let root = &roadmap.nodes[roadmap.root_index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<usize> = (0..roadmap.nodes.len())
        .filter(|&i| i != roadmap.root_index && ctg.labels[i].is_some())
        .collect();
    let mut out = Vec::new();
    if candidates.is_empty() {
        return out;
    }
    for _ in 0..count {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let ci = ctg.labels[i].unwrap();
        // Parent: neighbour realising the Dijkstra label.
        let parent = adj[i]
            .iter()
            .filter_map(|&(j, w)| ctg.labels[j].map(|cj| (j, (cj + w - ci).abs())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j);
        if let Some(j) = parent {
            let dir = &roadmap.nodes[j] - &roadmap.nodes[i];
            let len = dir.norm();
            if len > 0.0 {
                out.push(DemoTriple {
                    x: roadmap.nodes[i].clone(),
                    x_star: root.clone(),
                    xdot: dir / len,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_corridor_env, EnvConfig, Obstacle, Rect};

    fn v(x: f64, y: f64) -> StateVec {
        StateVec::from_row_slice(&[x, y])
    }

    fn open_env() -> Environment {
        Environment::preset("empty").unwrap()
    }

    fn chain(weights: &[(usize, usize, f64)], n: usize) -> Roadmap {
        Roadmap {
            nodes: (0..n).map(|i| v(i as f64, 0.0)).collect(),
            edges: weights.to_vec(),
            root_index: 0,
        }
    }

    #[test]
    fn rrt_single_node_is_root() {
        let nodes = rrt_grow(&open_env(), &v(0.5, 0.5), 1, 0.1, 3).unwrap();
        assert_eq!(nodes, vec![v(0.5, 0.5)]);
    }

    #[test]
    fn rrt_rejects_unsafe_root() {
        let env = Environment::preset("corridor-v1").unwrap();
        assert!(matches!(
            rrt_grow(&env, &v(1.0, 0.5), 10, 0.1, 0),
            Err(RoadmapError::UnsafeRoot(_))
        ));
    }

    #[test]
    fn rrt_nodes_inside_open_workspace() {
        let env = open_env();
        let nodes = rrt_grow(&env, &v(0.5, 0.5), 100, 0.07, 11).unwrap();
        assert_eq!(nodes.len(), 100);
        assert!(nodes.iter().all(|x| env.is_safe(x)));
    }

    #[test]
    fn two_visible_nodes_one_edge() {
        let g = build_knn_graph(&open_env(), &[v(0.1, 0.1), v(0.4, 0.5)], 1).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn obstacle_blocks_edge() {
        let env = make_corridor_env(EnvConfig {
            workspace: Rect::new([0.0, 0.0], [3.0, 1.0]),
            obstacles: vec![Obstacle::rect([1.4, 0.4], [1.6, 0.6])],
            boundary_margin: None,
        })
        .unwrap();
        let nodes = [v(0.5, 0.5), v(1.0, 0.5), v(2.0, 0.5)];
        let g = build_knn_graph(&env, &nodes, 2).unwrap();
        assert!(g.edges.iter().any(|e| (e.0, e.1) == (0, 1)));
        assert!(!g.edges.iter().any(|e| (e.0, e.1) == (1, 2)));
    }

    #[test]
    fn full_k_gives_complete_graph() {
        let env = open_env();
        let nodes = env.sample_safe(12, 5).unwrap();
        let g = build_knn_graph(&env, &nodes, 11).unwrap();
        assert_eq!(g.edges.len(), 12 * 11 / 2);
    }

    #[test]
    fn chain_labels() {
        let r = chain(&[(0, 1, 1.0), (1, 2, 1.0)], 3);
        let c = cost_to_go(&r).unwrap();
        assert_eq!(c.labels, vec![Some(0.0), Some(1.0), Some(2.0)]);
    }

    #[test]
    fn triangle_prefers_two_hops() {
        let r = chain(&[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 3.0)], 3);
        assert_eq!(cost_to_go(&r).unwrap().labels[2], Some(2.0));
    }

    #[test]
    fn isolated_node_dropped() {
        let r = chain(&[(0, 1, 1.0), (1, 2, 1.0)], 4);
        let c = cost_to_go(&r).unwrap();
        assert_eq!(c.unreachable, 1);
        assert_eq!(c.labels[3], None);
    }

    #[test]
    fn mostly_unreachable_is_error() {
        let r = chain(&[(0, 1, 1.0)], 5);
        assert!(matches!(cost_to_go(&r), Err(RoadmapError::TooSparse { .. })));
    }

    #[test]
    fn assemble_sets_unsafe_level() {
        let labeled = vec![(v(0.0, 0.0), 0.0), (v(1.0, 0.0), 1.0), (v(2.0, 0.0), 2.0)];
        let d = assemble_datasets(labeled.clone(), vec![v(5.0, 5.0), v(6.0, 6.0)], 0.5).unwrap();
        assert_eq!(d.c_bar, 2.0);
        assert!(d.unsafe_.iter().all(|(_, c)| *c == 2.5));
        let empty = assemble_datasets(labeled.clone(), vec![], 0.5).unwrap();
        assert_eq!(empty.counts(), (3, 0, 0));
        assert!(assemble_datasets(labeled, vec![], 0.0).is_err());
    }
}
