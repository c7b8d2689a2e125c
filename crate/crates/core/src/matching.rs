//! Tentative match graph: connected components, track separation and
//! topological reference selection.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{ImageId, Observation};

/// Components up to this size are separated by exhaustive minimum-cut search.
pub const EXACT_SEPARATION_MAX_NODES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("match connects keypoint {0:?} to itself")]
    SelfMatch(Observation),
    #[error("match between {0:?} and {1:?} lies within one image")]
    SameImage(Observation, Observation),
    #[error("match confidence {0} is not positive")]
    NonPositiveConfidence(f64),
}

/// A tentative correspondence between keypoints of two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: Observation,
    pub b: Observation,
    pub confidence: f64,
}

impl Match {
    pub fn new(a: Observation, b: Observation, confidence: f64) -> Self {
        Match { a, b, confidence }
    }
}

/// Undirected weighted edge with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: Observation,
    pub b: Observation,
    pub confidence: f64,
}

impl Edge {
    pub fn new(u: Observation, v: Observation, confidence: f64) -> Self {
        let (a, b) = if u <= v { (u, v) } else { (v, u) };
        Edge { a, b, confidence }
    }

    pub fn key(&self) -> (Observation, Observation) {
        (self.a, self.b)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchGraph {
    edges: BTreeMap<(Observation, Observation), f64>,
    adjacency: BTreeMap<Observation, BTreeSet<Observation>>,
}

impl MatchGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Observation> {
        self.adjacency.keys()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|(&(a, b), &w)| Edge {
            a,
            b,
            confidence: w,
        })
    }

    pub fn neighbors(&self, node: &Observation) -> impl Iterator<Item = &Observation> {
        self.adjacency.get(node).into_iter().flatten()
    }

    pub fn confidence(&self, u: Observation, v: Observation) -> Option<f64> {
        let e = Edge::new(u, v, 0.0);
        self.edges.get(&e.key()).copied()
    }
}

/// Builds the undirected match graph; duplicate edges keep the highest confidence.
pub fn build_graph(matches: &[Match]) -> Result<MatchGraph, MatchError> {
    let mut graph = MatchGraph::default();
    for m in matches {
        if m.a == m.b {
            return Err(MatchError::SelfMatch(m.a));
        }
        if m.a.image_id == m.b.image_id {
            return Err(MatchError::SameImage(m.a, m.b));
        }
        if !(m.confidence > 0.0) {
            return Err(MatchError::NonPositiveConfidence(m.confidence));
        }
        let e = Edge::new(m.a, m.b, m.confidence);
        let w = graph.edges.entry(e.key()).or_insert(m.confidence);
        *w = w.max(m.confidence);
        graph.adjacency.entry(e.a).or_default().insert(e.b);
        graph.adjacency.entry(e.b).or_default().insert(e.a);
    }
    Ok(graph)
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns the new root, or `None` if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> Option<usize> {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return None;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        Some(ra)
    }
}

/// A connected subgraph: sorted nodes and the edges among them.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub nodes: Vec<Observation>,
    pub edges: Vec<Edge>,
}

impl Component {
    pub fn is_valid_track(&self) -> bool {
        has_unique_images(&self.nodes)
    }

    pub fn total_confidence(&self) -> f64 {
        self.edges.iter().map(|e| e.confidence).sum()
    }
}

fn has_unique_images(nodes: &[Observation]) -> bool {
    let mut seen = BTreeSet::new();
    nodes.iter().all(|n| seen.insert(n.image_id))
}

/// Splits `nodes` into the connected components induced by `edges`,
/// dropping singletons. Output is sorted by smallest member.
fn split_components(nodes: &[Observation], edges: &[Edge]) -> Vec<Component> {
    let index: BTreeMap<Observation, usize> =
        nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut uf = UnionFind::new(nodes.len());
    for e in edges {
        uf.union(index[&e.a], index[&e.b]);
    }
    let mut groups: BTreeMap<usize, Component> = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        let root = uf.find(i);
        groups
            .entry(root)
            .or_insert_with(|| Component {
                nodes: Vec::new(),
                edges: Vec::new(),
            })
            .nodes
            .push(*n);
    }
    for e in edges {
        let root = uf.find(index[&e.a]);
        groups.get_mut(&root).unwrap().edges.push(*e);
    }
    let mut out: Vec<Component> = groups.into_values().filter(|c| c.nodes.len() > 1).collect();
    for c in &mut out {
        c.nodes.sort();
        c.edges.sort_by_key(|e| e.key());
    }
    out.sort_by_key(|c| c.nodes[0]);
    out
}

/// Connected components of the match graph with at least two nodes.
pub fn connected_components(graph: &MatchGraph) -> Vec<Component> {
    let nodes: Vec<Observation> = graph.nodes().copied().collect();
    let edges: Vec<Edge> = graph.edges().collect();
    split_components(&nodes, &edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TentativeTrack {
    pub track_id: usize,
    /// Sorted, at most one per image.
    pub members: Vec<Observation>,
    pub edges: Vec<Edge>,
    /// Topological center, frozen during keypoint adjustment.
    pub reference: Observation,
}

impl TentativeTrack {
    fn from_component(track_id: usize, component: Component) -> Self {
        let reference = center_of(&component.nodes, &component.edges);
        TentativeTrack {
            track_id,
            members: component.nodes,
            edges: component.edges,
            reference,
        }
    }
}

/// Splits a connected component into tracks with at most one keypoint per
/// image, removing as little match confidence as possible.
///
/// Components with at most [`EXACT_SEPARATION_MAX_NODES`] nodes are solved
/// exactly; larger ones use a greedy union-find merge in order of decreasing
/// confidence that refuses merges creating image conflicts.
pub fn separate_tracks(component: &Component) -> Vec<TentativeTrack> {
    let groups = if component.is_valid_track() {
        vec![0; component.nodes.len()]
    } else if component.nodes.len() <= EXACT_SEPARATION_MAX_NODES {
        exact_partition(component)
    } else {
        greedy_partition(component)
    };
    let kept: Vec<Edge> = component
        .edges
        .iter()
        .filter(|e| {
            let ia = component.nodes.binary_search(&e.a).unwrap();
            let ib = component.nodes.binary_search(&e.b).unwrap();
            groups[ia] == groups[ib]
        })
        .copied()
        .collect();
    split_components(&component.nodes, &kept)
        .into_iter()
        .map(|c| TentativeTrack::from_component(0, c))
        .collect()
}

/// Minimum-weight cut into groups without image conflicts, by depth-first
/// assignment of nodes to groups with branch-and-bound on the cut weight.
fn exact_partition(component: &Component) -> Vec<usize> {
    let n = component.nodes.len();
    let mut weight = vec![vec![0.0; n]; n];
    for e in &component.edges {
        let a = component.nodes.binary_search(&e.a).unwrap();
        let b = component.nodes.binary_search(&e.b).unwrap();
        weight[a][b] += e.confidence;
        weight[b][a] += e.confidence;
    }
    struct Search<'a> {
        images: Vec<ImageId>,
        weight: &'a [Vec<f64>],
        assign: Vec<usize>,
        best: Vec<usize>,
        best_cost: f64,
    }
    impl Search<'_> {
        fn visit(&mut self, k: usize, groups: usize, cost: f64) {
            if cost >= self.best_cost {
                return;
            }
            let n = self.images.len();
            if k == n {
                self.best_cost = cost;
                self.best = self.assign.clone();
                return;
            }
            for g in 0..=groups {
                if g < groups
                    && (0..k).any(|j| self.assign[j] == g && self.images[j] == self.images[k])
                {
                    continue;
                }
                let added: f64 = (0..k)
                    .filter(|&j| self.assign[j] != g)
                    .map(|j| self.weight[k][j])
                    .sum();
                self.assign[k] = g;
                self.visit(k + 1, groups.max(g + 1), cost + added);
            }
        }
    }
    let mut search = Search {
        images: component.nodes.iter().map(|o| o.image_id).collect(),
        weight: &weight,
        assign: vec![0; n],
        best: (0..n).collect(),
        best_cost: f64::INFINITY,
    };
    search.visit(0, 0, 0.0);
    search.best
}

fn greedy_partition(component: &Component) -> Vec<usize> {
    let n = component.nodes.len();
    let mut order: Vec<&Edge> = component.edges.iter().collect();
    order.sort_by(|x, y| {
        y.confidence
            .total_cmp(&x.confidence)
            .then(x.key().cmp(&y.key()))
    });
    let mut uf = UnionFind::new(n);
    let mut images: Vec<BTreeSet<ImageId>> = component
        .nodes
        .iter()
        .map(|o| BTreeSet::from([o.image_id]))
        .collect();
    for e in order {
        let a = uf.find(component.nodes.binary_search(&e.a).unwrap());
        let b = uf.find(component.nodes.binary_search(&e.b).unwrap());
        if a == b || !images[a].is_disjoint(&images[b]) {
            continue;
        }
        let root = uf.union(a, b).unwrap();
        let other = if root == a { b } else { a };
        let moved = std::mem::take(&mut images[other]);
        images[root].extend(moved);
    }
    (0..n).map(|i| uf.find(i)).collect()
}

fn center_of(members: &[Observation], edges: &[Edge]) -> Observation {
    let mut degree: BTreeMap<Observation, usize> = members.iter().map(|m| (*m, 0)).collect();
    for e in edges {
        *degree.entry(e.a).or_default() += 1;
        *degree.entry(e.b).or_default() += 1;
    }
    // BTreeMap iterates in key order, so the first maximum wins ties
    let mut best = members[0];
    let mut best_degree = 0;
    for (node, d) in degree {
        if d > best_degree {
            best = node;
            best_degree = d;
        }
    }
    best
}

/// Member with the highest degree in the track's match edges; ties go to the
/// lowest `(image_id, keypoint_id)`.
pub fn topological_center(track: &TentativeTrack) -> Observation {
    center_of(&track.members, &track.edges)
}

/// Graph construction, component search and separation in one pass.
/// Track ids are assigned in order of each track's smallest member.
pub fn build_tentative_tracks(matches: &[Match]) -> Result<Vec<TentativeTrack>, MatchError> {
    let graph = build_graph(matches)?;
    let components = connected_components(&graph);
    let mut tracks: Vec<TentativeTrack> = components
        .par_iter()
        .flat_map_iter(separate_tracks)
        .collect();
    tracks.sort_by_key(|t| t.members[0]);
    for (i, t) in tracks.iter_mut().enumerate() {
        t.track_id = i;
    }
    Ok(tracks)
}
