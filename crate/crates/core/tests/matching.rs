use std::collections::{BTreeMap, BTreeSet, VecDeque};

use featref::matching::{
    build_graph, connected_components, separate_tracks, topological_center, Component, Edge, Match,
    TentativeTrack,
};
use featref::scene::Observation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matches(rng: &mut ChaCha8Rng, nodes: usize, images: u32, edges: usize) -> Vec<Match> {
    let pool: Vec<Observation> = (0..nodes)
        .map(|k| Observation::new(rng.gen_range(1..=images), k as u32))
        .collect();
    let mut out = Vec::new();
    while out.len() < edges {
        let a = pool[rng.gen_range(0..nodes)];
        let b = pool[rng.gen_range(0..nodes)];
        if a.image_id != b.image_id {
            out.push(Match::new(a, b, rng.gen_range(0.05..1.0)));
        }
    }
    out
}

fn bfs_labels(matches: &[Match]) -> Vec<BTreeSet<Observation>> {
    let mut adj: BTreeMap<Observation, Vec<Observation>> = BTreeMap::new();
    for m in matches {
        adj.entry(m.a).or_default().push(m.b);
        adj.entry(m.b).or_default().push(m.a);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in adj.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &m in &adj[&n] {
                if seen.insert(m) {
                    comp.insert(m);
                    queue.push_back(m);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[test]
fn components_agree_with_bfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let matches = random_matches(&mut rng, 40, 6, 30);
        let graph = build_graph(&matches).unwrap();
        let mut ours: Vec<BTreeSet<Observation>> = connected_components(&graph)
            .into_iter()
            .map(|c| c.nodes.into_iter().collect())
            .collect();
        let mut oracle = bfs_labels(&matches);
        ours.sort();
        oracle.sort();
        assert_eq!(ours, oracle);
    }
}

/// Minimum confidence removed by any partition into image-unique groups.
fn brute_force_min_removed(component: &Component) -> f64 {
    let n = component.nodes.len();
    let index: BTreeMap<Observation, usize> = component
        .nodes
        .iter()
        .enumerate()
        .map(|(i, o)| (*o, i))
        .collect();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    fn rec(
        k: usize,
        groups: usize,
        labels: &mut Vec<usize>,
        c: &Component,
        index: &BTreeMap<Observation, usize>,
        best: &mut f64,
    ) {
        if k == labels.len() {
            let removed: f64 = c
                .edges
                .iter()
                .filter(|e| labels[index[&e.a]] != labels[index[&e.b]])
                .map(|e| e.confidence)
                .sum();
            *best = best.min(removed);
            return;
        }
        for g in 0..=groups {
            let clash =
                (0..k).any(|j| labels[j] == g && c.nodes[j].image_id == c.nodes[k].image_id);
            if clash {
                continue;
            }
            labels[k] = g;
            rec(k + 1, groups.max(g + 1), labels, c, index, best);
        }
    }
    rec(0, 0, &mut labels, component, &index, &mut best);
    best
}

fn kept_confidence(tracks: &[TentativeTrack]) -> f64 {
    tracks
        .iter()
        .flat_map(|t| t.edges.iter())
        .map(|e| e.confidence)
        .sum()
}

#[test]
fn separation_is_minimal_on_small_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conflicting = 0;
    for _ in 0..100 {
        let matches = random_matches(&mut rng, 24, 4, 22);
        let graph = build_graph(&matches).unwrap();
        for comp in connected_components(&graph)
            .into_iter()
            .filter(|c| c.nodes.len() <= 8)
        {
            let tracks = separate_tracks(&comp);
            for t in &tracks {
                let images: BTreeSet<u32> = t.members.iter().map(|o| o.image_id).collect();
                assert_eq!(images.len(), t.members.len());
            }
            let removed = comp.total_confidence() - kept_confidence(&tracks);
            let oracle = brute_force_min_removed(&comp);
            assert!(
                (removed - oracle).abs() < 1e-9,
                "removed {removed} vs minimum {oracle}"
            );
            conflicting += usize::from(!comp.is_valid_track());
        }
    }
    assert!(
        conflicting >= 20,
        "only {conflicting} components had image conflicts"
    );
}

#[test]
fn center_agrees_with_degree_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let members: Vec<Observation> = (0..10)
            .map(|i| Observation::new(i + 1, rng.gen_range(0..5)))
            .collect();
        let mut edges = BTreeMap::new();
        for k in 1..10 {
            let j = rng.gen_range(0..k);
            edges.insert(
                (members[j], members[k]),
                Edge::new(members[j], members[k], rng.gen_range(0.1..1.0)),
            );
        }
        for _ in 0..rng.gen_range(0..15) {
            let (a, b) = (rng.gen_range(0..10), rng.gen_range(0..10));
            if a < b {
                edges.insert(
                    (members[a], members[b]),
                    Edge::new(members[a], members[b], rng.gen_range(0.1..1.0)),
                );
            }
        }
        let edges: Vec<Edge> = edges.into_values().collect();
        let mut degree: BTreeMap<Observation, usize> = members.iter().map(|m| (*m, 0)).collect();
        for e in &edges {
            *degree.get_mut(&e.a).unwrap() += 1;
            *degree.get_mut(&e.b).unwrap() += 1;
        }
        let max = *degree.values().max().unwrap();
        let expected = *degree.iter().find(|(_, d)| **d == max).unwrap().0;
        let mut sorted = members.clone();
        sorted.sort();
        let track = TentativeTrack {
            track_id: 0,
            members: sorted,
            edges: edges.clone(),
            reference: expected,
        };
        assert_eq!(topological_center(&track), expected);
        let scaled = TentativeTrack {
            edges: edges
                .iter()
                .map(|e| Edge::new(e.a, e.b, e.confidence * 0.01))
                .collect(),
            ..track
        };
        assert_eq!(topological_center(&scaled), expected);
    }
}

proptest! {
    #[test]
    fn separation_never_adds_nodes_or_edges(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matches = random_matches(&mut rng, 30, 5, 40);
        let graph = build_graph(&matches).unwrap();
        for comp in connected_components(&graph) {
            let nodes: BTreeSet<Observation> = comp.nodes.iter().copied().collect();
            let edges: BTreeSet<(Observation, Observation)> = comp.edges.iter().map(|e| e.key()).collect();
            let mut used = BTreeSet::new();
            for t in separate_tracks(&comp) {
                prop_assert!(t.members.contains(&t.reference));
                let images: BTreeSet<u32> = t.members.iter().map(|o| o.image_id).collect();
                prop_assert_eq!(images.len(), t.members.len());
                for m in &t.members {
                    prop_assert!(nodes.contains(m));
                    prop_assert!(used.insert(*m));
                }
                for e in &t.edges {
                    prop_assert!(edges.contains(&e.key()));
                }
            }
        }
    }
}
