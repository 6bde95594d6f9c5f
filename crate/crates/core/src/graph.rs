//! Latent kNN roadmap over safe samples, Dijkstra routing and the blocked-node overlay.
//!
//! Node ids are dataset sample indices. The adjacency map never changes after `build`;
//! live obstacles only edit the overlay, which is shared copy-on-update.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{link_capsules_world, ArmModel};
use crate::collision::{min_clearance, ConvexShape};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::manifold::{latent_distance, Embedding};

pub const DEFAULT_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub z: Vec<f64>,
    /// Always true for stored nodes; kept for the file format.
    pub safe: bool,
    /// Member of the largest connected component.
    pub giant: bool,
}

pub type Overlay = Arc<BTreeSet<usize>>;

#[derive(Debug, Clone)]
pub struct PlanGraph {
    pub nodes: BTreeMap<usize, NodeInfo>,
    pub adj: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub blocked: Overlay,
    pub k: usize,
    pub dataset_hash: String,
    pub embedding_hash: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<usize>,
    pub weight: f64,
    pub created_at: f64,
    pub revision: u32,
}

impl Route {
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Union-symmetrized kNN graph on latent points; `ids[i]` labels `points[i]`.
pub fn knn_adjacency(ids: &[usize], points: &[Vec<f64>], k: usize) -> BTreeMap<usize, BTreeMap<usize, f64>> {
    let n = ids.len();
    let lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&b| b != a)
                .map(|b| (latent_distance(&points[a], &points[b]), b))
                .collect();
            let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(ids[x.1].cmp(&ids[y.1]));
            let kk = k.min(all.len());
            if kk > 0 && kk < all.len() {
                all.select_nth_unstable_by(kk - 1, cmp);
            }
            all.truncate(kk);
            all.into_iter().map(|(d, b)| (b, d)).collect()
        })
        .collect();
    let mut adj: BTreeMap<usize, BTreeMap<usize, f64>> = ids.iter().map(|&i| (i, BTreeMap::new())).collect();
    for (a, list) in lists.iter().enumerate() {
        for &(b, w) in list {
            adj.get_mut(&ids[a]).expect("node").insert(ids[b], w);
            adj.get_mut(&ids[b]).expect("node").insert(ids[a], w);
        }
    }
    adj
}

fn component_labels(adj: &BTreeMap<usize, BTreeMap<usize, f64>>) -> BTreeMap<usize, usize> {
    let mut label = BTreeMap::new();
    let mut next = 0;
    for &s in adj.keys() {
        if label.contains_key(&s) {
            continue;
        }
        let mut stack = vec![s];
        label.insert(s, next);
        while let Some(u) = stack.pop() {
            for &v in adj[&u].keys() {
                if let std::collections::btree_map::Entry::Vacant(e) = label.entry(v) {
                    e.insert(next);
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn build(emb: &Embedding, ds: &Dataset, k: usize) -> Result<PlanGraph> {
    if k < 1 {
        return Err(Error::Config("graph k must be >= 1".into()));
    }
    if emb.len() != ds.len() {
        return Err(Error::ArtifactMismatch(format!(
            "embedding has {} rows, dataset has {}",
            emb.len(),
            ds.len()
        )));
    }
    if emb.dataset_hash != ds.hash {
        return Err(Error::ArtifactMismatch(format!(
            "embedding was built from dataset {}, not {}",
            emb.dataset_hash, ds.hash
        )));
    }
    let ids: Vec<usize> = (0..ds.len()).filter(|&i| !ds.samples[i].collision).collect();
    build_from_points(
        &ids,
        ids.iter().map(|&i| emb.coords[i].clone()).collect(),
        k,
        &ds.hash,
        &emb.hash,
    )
}

pub fn build_from_points(
    ids: &[usize],
    points: Vec<Vec<f64>>,
    k: usize,
    dataset_hash: &str,
    embedding_hash: &str,
) -> Result<PlanGraph> {
    if ids.len() < 2 {
        return Err(Error::GraphBuild(format!(
            "{} safe node(s); at least 2 are required",
            ids.len()
        )));
    }
    let adj = knn_adjacency(ids, &points, k);
    let labels = component_labels(&adj);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels.values() {
        *sizes.entry(*l).or_default() += 1;
    }
    let giant = sizes
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(l, _)| *l)
        .expect("non-empty");
    if sizes.len() > 1 {
        log::warn!(
            "plan graph has {} components; {} node(s) outside the giant component",
            sizes.len(),
            ids.len() - sizes[&giant]
        );
    }
    let nodes = ids
        .iter()
        .zip(points)
        .map(|(&i, z)| {
            (
                i,
                NodeInfo {
                    z,
                    safe: true,
                    giant: labels[&i] == giant,
                },
            )
        })
        .collect();
    let mut g = PlanGraph {
        nodes,
        adj,
        blocked: Arc::new(BTreeSet::new()),
        k,
        dataset_hash: dataset_hash.to_string(),
        embedding_hash: embedding_hash.to_string(),
        hash: String::new(),
    };
    g.hash = g.content_hash();
    Ok(g)
}

impl PlanGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.nodes.contains_key(&node)
    }

    pub fn giant_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|(_, n)| n.giant).map(|(i, _)| *i)
    }

    pub fn is_blocked(&self, node: usize) -> bool {
        self.blocked.contains(&node)
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeMap::len).sum::<usize>() / 2
    }

    fn content_hash(&self) -> String {
        let mut h = ContentHasher::new("graph");
        h.str(&self.dataset_hash)
            .str(&self.embedding_hash)
            .u64(self.k as u64)
            .u64(self.nodes.len() as u64);
        for (i, info) in &self.nodes {
            h.u64(*i as u64).f64s(&info.z).u64(info.giant as u64);
            for (j, w) in &self.adj[i] {
                h.u64(*j as u64).f64(*w);
            }
        }
        h.finish()
    }

    pub fn with_blocked(&self, blocked: BTreeSet<usize>) -> Self {
        PlanGraph {
            blocked: Arc::new(blocked),
            ..self.clone()
        }
    }

    /// Graph nodes within latent `radius` of any of `centers`.
    pub fn latent_tube(&self, centers: &[usize], radius: f64) -> Vec<usize> {
        let pts: Vec<&Vec<f64>> = centers
            .iter()
            .filter_map(|c| self.nodes.get(c).map(|n| &n.z))
            .collect();
        self.nodes
            .iter()
            .filter(|(_, n)| pts.iter().any(|p| latent_distance(p, &n.z) <= radius))
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let header = GraphHeader {
            kind: GRAPH_KIND.to_string(),
            dataset_hash: self.dataset_hash.clone(),
            embedding_hash: self.embedding_hash.clone(),
            k: self.k,
            nodes: self.nodes.len(),
            hash: self.hash.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (i, info) in &self.nodes {
            let (neighbors, weights): (Vec<usize>, Vec<f64>) = self.adj[i].iter().map(|(j, w)| (*j, *w)).unzip();
            let line = GraphLine {
                node: *i,
                neighbors,
                weights,
                safe: info.safe,
                giant: info.giant,
                z: info.z.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty graph file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: GraphHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.kind != GRAPH_KIND {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!("expected kind '{GRAPH_KIND}', found '{}'", header.kind),
            });
        }
        let mut nodes = BTreeMap::new();
        let mut adj = BTreeMap::new();
        for (k, line) in lines.enumerate() {
            let line_no = k + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: GraphLine = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            if l.neighbors.len() != l.weights.len() {
                return Err(parse_err(line_no, "neighbors and weights differ in length".into()));
            }
            adj.insert(l.node, l.neighbors.into_iter().zip(l.weights).collect());
            nodes.insert(
                l.node,
                NodeInfo {
                    z: l.z,
                    safe: l.safe,
                    giant: l.giant,
                },
            );
        }
        if nodes.len() != header.nodes {
            return Err(parse_err(
                nodes.len() + 2,
                format!("truncated: header declares {} nodes, found {}", header.nodes, nodes.len()),
            ));
        }
        let mut g = PlanGraph {
            nodes,
            adj,
            blocked: Arc::new(BTreeSet::new()),
            k: header.k,
            dataset_hash: header.dataset_hash,
            embedding_hash: header.embedding_hash,
            hash: String::new(),
        };
        for (i, nb) in &g.adj {
            for (j, w) in nb {
                if g.adj.get(j).and_then(|m| m.get(i)) != Some(w) {
                    return Err(Error::Schema {
                        path: path.to_path_buf(),
                        message: format!("edge {i}-{j} is not symmetric"),
                    });
                }
            }
        }
        g.hash = g.content_hash();
        if g.hash != header.hash {
            return Err(Error::ArtifactMismatch(format!(
                "{}: content hash {} does not match header {}",
                path.display(),
                g.hash,
                header.hash
            )));
        }
        Ok(g)
    }
}

const GRAPH_KIND: &str = "latentcatch graph v1";

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    kind: String,
    dataset_hash: String,
    embedding_hash: String,
    k: usize,
    nodes: usize,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    node: usize,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    safe: bool,
    giant: bool,
    z: Vec<f64>,
}

/// Distances to `dst` over unblocked nodes, plus each node's next hop in the Dijkstra tree.
fn distances_to(g: &PlanGraph, dst: usize) -> BTreeMap<usize, (f64, usize)> {
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(dst, (0.0, dst));
    heap.push(Reverse((Dist(0.0), dst)));
    while let Some(Reverse((Dist(d), u))) = heap.pop() {
        if best.get(&u).is_some_and(|b| b.0 < d) {
            continue;
        }
        for (&v, &w) in &g.adj[&u] {
            if g.is_blocked(v) {
                continue;
            }
            let nd = d + w;
            let better = match best.get(&v) {
                None => true,
                Some(&(old, parent)) => nd < old || (nd == old && u < parent),
            };
            if better {
                best.insert(v, (nd, u));
                heap.push(Reverse((Dist(nd), v)));
            }
        }
    }
    best
}

pub fn shortest_path(g: &PlanGraph, src: usize, dst: usize) -> Result<Route> {
    let no_path = || Error::NoPath {
        src,
        dst,
        blocked: g.blocked.len(),
    };
    if !g.contains(src) || !g.contains(dst) {
        return Err(Error::Domain(format!("route endpoints {src}, {dst} must be graph nodes")));
    }
    if g.is_blocked(src) || g.is_blocked(dst) {
        return Err(no_path());
    }
    if src == dst {
        return Ok(Route {
            nodes: vec![src],
            weight: 0.0,
            created_at: 0.0,
            revision: 0,
        });
    }
    let dist = distances_to(g, dst);
    let Some(&(total, _)) = dist.get(&src) else {
        return Err(no_path());
    };
    // smallest-index successor among exactly optimal continuations
    let mut nodes = vec![src];
    let mut visited = BTreeSet::from([src]);
    let mut u = src;
    while u != dst {
        let du = dist[&u].0;
        let tol = 1e-12 * du.max(1.0);
        let next = g.adj[&u]
            .iter()
            .filter(|(v, _)| !visited.contains(*v))
            .filter_map(|(&v, &w)| dist.get(&v).map(|&(dv, _)| (v, dv + w)))
            .find(|&(_, through)| (through - du).abs() <= tol)
            .map(|(v, _)| v)
            .unwrap_or(dist[&u].1);
        if !visited.insert(next) {
            // zero-weight cycles: fall back to the tree path
            let mut tail = vec![];
            let mut x = dist[&u].1;
            while x != dst {
                tail.push(x);
                x = dist[&x].1;
            }
            tail.push(dst);
            nodes.extend(tail);
            break;
        }
        nodes.push(next);
        u = next;
    }
    let weight = nodes.windows(2).map(|p| g.adj[&p[0]][&p[1]]).sum::<f64>();
    debug_assert!((weight - total).abs() <= 1e-9 * total.max(1.0));
    Ok(Route {
        nodes,
        weight,
        created_at: 0.0,
        revision: 0,
    })
}

/// Shortest path from `current` on the graph minus the overlay, one revision after `previous`.
pub fn reroute(g: &PlanGraph, previous: &Route, current: usize, dst: usize, now: f64) -> Result<Route> {
    let mut r = shortest_path(g, current, dst)?;
    r.revision = previous.revision + 1;
    r.created_at = now;
    Ok(r)
}

/// New overlay: previous marks outside `candidates` kept, candidates re-decided by `is_blocked`.
pub fn relabel_with(g: &PlanGraph, candidates: &[usize], is_blocked: impl Fn(usize) -> bool) -> Overlay {
    let cand: BTreeSet<usize> = candidates.iter().copied().filter(|c| g.contains(*c)).collect();
    let mut next: BTreeSet<usize> = g.blocked.difference(&cand).copied().collect();
    next.extend(cand.into_iter().filter(|&c| is_blocked(c)));
    if next == *g.blocked {
        g.blocked.clone()
    } else {
        Arc::new(next)
    }
}

/// Poses the arm at each candidate's stored joints and blocks it when any link touches a live
/// obstacle (margins included).
pub fn relabel_blocked(
    g: &PlanGraph,
    ds: &Dataset,
    model: &ArmModel,
    obstacles: &[ConvexShape],
    candidates: &[usize],
) -> Overlay {
    if obstacles.is_empty() {
        return relabel_with(g, candidates, |_| false);
    }
    relabel_with(g, candidates, |c| match link_capsules_world(model, &ds.samples[c].theta) {
        Ok(links) => {
            let cl = min_clearance(&links, obstacles);
            cl.penetrating || cl.distance <= 0.0
        }
        Err(_) => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manual(edges: &[(usize, usize, f64)], n: usize) -> PlanGraph {
        let mut adj: BTreeMap<usize, BTreeMap<usize, f64>> = (0..n).map(|i| (i, BTreeMap::new())).collect();
        for &(a, b, w) in edges {
            adj.get_mut(&a).unwrap().insert(b, w);
            adj.get_mut(&b).unwrap().insert(a, w);
        }
        PlanGraph {
            nodes: (0..n)
                .map(|i| (i, NodeInfo { z: vec![i as f64, 0.0], safe: true, giant: true }))
                .collect(),
            adj,
            blocked: Arc::new(BTreeSet::new()),
            k: 0,
            dataset_hash: String::new(),
            embedding_hash: String::new(),
            hash: String::new(),
        }
    }

    /// Exhaustive simple-path enumeration: minimal weight, then lexicographic sequence.
    fn brute(g: &PlanGraph, src: usize, dst: usize) -> Option<(f64, Vec<usize>)> {
        fn dfs(g: &PlanGraph, u: usize, dst: usize, path: &mut Vec<usize>, w: f64, best: &mut Option<(f64, Vec<usize>)>) {
            if u == dst {
                let better = match best {
                    None => true,
                    Some((bw, bp)) => w < *bw - 1e-12 || ((w - *bw).abs() <= 1e-12 && path < bp),
                };
                if better {
                    *best = Some((w, path.clone()));
                }
                return;
            }
            for (&v, &ew) in &g.adj[&u] {
                if path.contains(&v) || g.is_blocked(v) {
                    continue;
                }
                path.push(v);
                dfs(g, v, dst, path, w + ew, best);
                path.pop();
            }
        }
        if g.is_blocked(src) || g.is_blocked(dst) {
            return None;
        }
        let mut best = None;
        dfs(g, src, dst, &mut vec![src], 0.0, &mut best);
        best
    }

    fn random_graph(rng: &mut ChaCha8Rng, integer: bool) -> PlanGraph {
        let n = rng.random_range(2..=12);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.35) {
                    let w = if integer { rng.random_range(1..4) as f64 } else { rng.random_range(0.1..2.0) };
                    edges.push((a, b, w));
                }
            }
        }
        manual(&edges, n)
    }

    #[test]
    fn collinear_points() {
        let g = build_from_points(&[0, 1, 2], vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]], 1, "", "").unwrap();
        assert_eq!(g.adj[&0].len(), 1);
        assert_eq!(g.adj[&0][&1], 1.0);
        assert_eq!(g.adj[&1][&2], 2.0);
        assert!(!g.adj[&0].contains_key(&2));
        let r = shortest_path(&g, 0, 2).unwrap();
        assert_eq!(r.nodes, vec![0, 1, 2]);
        assert_eq!(r.weight, 3.0);
    }

    #[test]
    fn too_few_safe_nodes() {
        assert!(matches!(build_from_points(&[4], vec![vec![0.0]], 2, "", ""), Err(Error::GraphBuild(_))));
    }

    #[test]
    fn diamond_and_reroute() {
        // 0-1-3 weighs 2, 0-2-3 weighs 3
        let g = manual(&[(0, 1, 1.0), (1, 3, 1.0), (0, 2, 1.5), (2, 3, 1.5)], 4);
        let r = shortest_path(&g, 0, 3).unwrap();
        assert_eq!(r.nodes, vec![0, 1, 3]);
        assert_eq!(shortest_path(&g, 2, 2).unwrap().nodes, vec![2]);
        let same = reroute(&g, &r, 0, 3, 0.5).unwrap();
        assert_eq!(same.nodes, r.nodes);
        assert_eq!(same.revision, 1);
        let blocked = g.with_blocked(BTreeSet::from([1]));
        let alt = reroute(&blocked, &same, 0, 3, 1.0).unwrap();
        assert_eq!(alt.nodes, vec![0, 2, 3]);
        assert_eq!(alt.revision, 2);
        let cut = g.with_blocked(BTreeSet::from([1, 2]));
        assert!(matches!(reroute(&cut, &r, 0, 3, 1.0), Err(Error::NoPath { blocked: 2, .. })));
    }

    #[test]
    fn ties_pick_lexicographic_sequence() {
        let g = manual(&[(0, 2, 1.0), (2, 3, 1.0), (0, 1, 1.0), (1, 3, 1.0)], 4);
        assert_eq!(shortest_path(&g, 0, 3).unwrap().nodes, vec![0, 1, 3]);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        for seed in 0..100 {
            for integer in [false, true] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_graph(&mut rng, integer);
                let n = g.len();
                for src in 0..n {
                    for dst in 0..n {
                        let ours = shortest_path(&g, src, dst).ok();
                        let oracle = brute(&g, src, dst);
                        match (ours, oracle) {
                            (None, None) => {}
                            (Some(r), Some((w, p))) => {
                                assert!((r.weight - w).abs() < 1e-9, "seed {seed}");
                                assert_eq!(r.nodes, p, "seed {seed} {src}->{dst}");
                            }
                            (a, b) => panic!("seed {seed}: {a:?} vs {b:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn blocking_never_shortens_routes() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let g = random_graph(&mut rng, false);
            let n = g.len();
            let mut blocked = BTreeSet::new();
            let mut last = shortest_path(&g, 0, n - 1).map(|r| r.weight).unwrap_or(f64::INFINITY);
            for b in 1..n.saturating_sub(1) {
                if rng.random_bool(0.4) {
                    blocked.insert(b);
                    let w = shortest_path(&g.with_blocked(blocked.clone()), 0, n - 1)
                        .map(|r| r.weight)
                        .unwrap_or(f64::INFINITY);
                    assert!(w >= last);
                    last = w;
                }
            }
        }
    }

    #[test]
    fn overlay_replaces_only_candidates() {
        let g = manual(&[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)], 4).with_blocked(BTreeSet::from([0, 3]));
        let o = relabel_with(&g, &[0, 1], |c| c == 1);
        assert_eq!(*o, BTreeSet::from([1, 3]));
        let adj_before = g.adj.clone();
        let g2 = PlanGraph { blocked: o, ..g };
        assert_eq!(g2.adj, adj_before);
    }

    proptest! {
        #[test]
        fn knn_graph_is_symmetric(seed in 0u64..500, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random()]).collect();
            let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
            let g = build_from_points(&ids, pts.clone(), k, "", "").unwrap();
            for (a, nb) in &g.adj {
                prop_assert!(nb.len() >= k);
                for (b, w) in nb {
                    prop_assert_eq!(g.adj[b][a], *w);
                    let exact = latent_distance(&pts[(a - 1) / 3], &pts[(b - 1) / 3]);
                    prop_assert!((w - exact).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn relabel_matches_analytic_sphere_capsule() {
        use crate::collision::Geometry;
        use crate::dataset::{generate, Aabb};
        use crate::manifold::{embed_dataset, ManifoldConfig};
        use nalgebra::Vector3;

        let model = ArmModel::panda();
        let ds = generate(&model, 300, &Aabb::default_obstacle_box(), 12).unwrap();
        let (_, emb) = embed_dataset(&ds, &ManifoldConfig::default()).unwrap();
        let g = build(&emb, &ds, DEFAULT_K).unwrap();
        let all: Vec<usize> = g.nodes.keys().copied().collect();

        assert!(relabel_blocked(&g, &ds, &model, &[], &all).is_empty());
        let engulf = ConvexShape::sphere(Vector3::zeros(), 5.0);
        assert_eq!(relabel_blocked(&g, &ds, &model, &[engulf], &all).len(), all.len());

        let center = Vector3::new(0.45, 0.1, 0.45);
        let sphere = ConvexShape::sphere(center, 0.12).with_margin(0.03);
        let overlay = relabel_blocked(&g, &ds, &model, &[sphere], &all);
        let seg = |p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>| {
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            (p - (a + ab * t)).norm()
        };
        let oracle: BTreeSet<usize> = all
            .iter()
            .copied()
            .filter(|&i| {
                link_capsules_world(&model, &ds.samples[i].theta).unwrap().iter().any(|c| match &c.geometry {
                    Geometry::Capsule { a, b, radius } => seg(&center, a, b) - radius - 0.15 <= 0.0,
                    _ => unreachable!(),
                })
            })
            .collect();
        assert!(!oracle.is_empty() && oracle.len() < all.len());
        assert_eq!(*overlay, oracle);
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random(), rng.random()]).collect();
        let ids: Vec<usize> = (0..30).collect();
        let g = build_from_points(&ids, pts, 4, "d", "e").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        g.save(&p).unwrap();
        let back = PlanGraph::load(&p).unwrap();
        assert_eq!(back.adj, g.adj);
        assert_eq!(back.nodes, g.nodes);
        assert_eq!(back.hash, g.hash);
        let text = std::fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().take(10).collect();
        std::fs::write(&p, cut.join("\n")).unwrap();
        assert!(matches!(PlanGraph::load(&p), Err(Error::Parse { .. })));
    }
}
