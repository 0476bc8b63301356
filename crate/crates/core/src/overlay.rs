// SPDX-License-Identifier: Apache-2.0

//! Construction and evaluation of the DCR notification overlay.
//!
//! Three builders are layered on top of each other:
//!
//! 1. [`build_tree`] grows a spanning tree greedily from the DCR closest to
//!    the middle of the map, attaching each DCR either to its closest tree
//!    member or, when detouring through that member costs at least 25% more,
//!    to the member's parent.
//! 2. [`connect_leaves`] chains the tree's leaves in angular order around the
//!    root.
//! 3. [`add_wraparound`] joins the west-most and east-most DCRs, closing the
//!    flat map into a cylinder.
//!
//! Each stage only adds edges, so the delay metrics can only improve and the
//! flooding overhead can only grow from one stage to the next.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::f64::consts::TAU;
use std::fmt;

use thiserror::Error;

use crate::topology::{closest_of, distance, DcrId, Point, Topology, TopologyError};

/// Ratio by which the detour through the closest tree member must exceed the
/// direct link to its parent before the parent is chosen instead.
pub const DETOUR_THRESHOLD: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum OverlayError {
    #[error("overlay is disconnected: {0} cannot reach {1}")]
    Disconnected(DcrId, DcrId),
    #[error("unknown DCR {0}")]
    UnknownDcr(DcrId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Which of the three construction stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Algorithm {
    Tree = 1,
    LeafChain = 2,
    Wraparound = 3,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Tree, Algorithm::LeafChain, Algorithm::Wraparound];

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Self::Tree),
            2 => Some(Self::LeafChain),
            3 => Some(Self::Wraparound),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Undirected weighted graph over DCRs, rooted at the tree root.
///
/// The parent map and insertion order describe the spanning tree produced by
/// [`build_tree`]; they are carried through the later stages unchanged. An
/// overlay read back from text has no tree information.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    root: DcrId,
    nodes: BTreeSet<DcrId>,
    edges: BTreeMap<(DcrId, DcrId), f64>,
    parent: BTreeMap<DcrId, DcrId>,
    insertion_order: Vec<DcrId>,
}

type Adjacency = (Vec<DcrId>, BTreeMap<DcrId, usize>, Vec<Vec<(usize, f64)>>);

fn edge_key(a: DcrId, b: DcrId) -> (DcrId, DcrId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Overlay {
    pub fn root(&self) -> DcrId {
        self.root
    }

    pub fn nodes(&self) -> &BTreeSet<DcrId> {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Edges as `(low id, high id, cost)`, ordered by id pair.
    pub fn edges(&self) -> impl Iterator<Item = (DcrId, DcrId, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &c)| (a, b, c))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_set(&self) -> BTreeSet<(DcrId, DcrId)> {
        self.edges.keys().copied().collect()
    }

    pub fn has_edge(&self, a: DcrId, b: DcrId) -> bool {
        self.edges.contains_key(&edge_key(a, b))
    }

    pub fn edge_cost(&self, a: DcrId, b: DcrId) -> Option<f64> {
        self.edges.get(&edge_key(a, b)).copied()
    }

    /// Parent of `node` in the spanning tree. `None` for the root and for
    /// overlays without tree information.
    pub fn parent(&self, node: DcrId) -> Option<DcrId> {
        self.parent.get(&node).copied()
    }

    pub fn parents(&self) -> &BTreeMap<DcrId, DcrId> {
        &self.parent
    }

    /// Order in which the tree builder attached nodes, root first.
    pub fn insertion_order(&self) -> &[DcrId] {
        &self.insertion_order
    }

    /// Adds an edge unless it is a self loop or already present. Returns
    /// whether the edge set changed.
    fn add_edge(&mut self, a: DcrId, b: DcrId, cost: f64) -> bool {
        if a == b {
            return false;
        }
        let key = edge_key(a, b);
        if self.edges.contains_key(&key) {
            return false;
        }
        self.edges.insert(key, cost);
        true
    }

    /// Neighbour lists indexed by position in `nodes`.
    fn adjacency(&self) -> Adjacency {
        let ids: Vec<DcrId> = self.nodes.iter().copied().collect();
        let index: BTreeMap<DcrId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for (&(a, b), &c) in &self.edges {
            let (ia, ib) = (index[&a], index[&b]);
            adj[ia].push((ib, c));
            adj[ib].push((ia, c));
        }
        (ids, index, adj)
    }

    /// Serializes as `root <id>` followed by one `edge <a> <b> <cost>` line
    /// per edge, ordered by id pair, costs with six decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("root {}\n", self.root);
        for (a, b, c) in self.edges() {
            out.push_str(&format!("edge {a} {b} {c:.6}\n"));
        }
        out
    }

    /// Reads the text format, taking edge costs from the file.
    pub fn parse(text: &str) -> Result<Self, OverlayError> {
        let (root, raw_edges) = parse_lines(text)?;
        let mut nodes: BTreeSet<DcrId> = BTreeSet::from([root]);
        let mut edges = BTreeMap::new();
        for (_, a, b, c) in raw_edges {
            nodes.insert(a);
            nodes.insert(b);
            edges.insert(edge_key(a, b), c);
        }
        Ok(Self {
            root,
            nodes,
            edges,
            parent: BTreeMap::new(),
            insertion_order: Vec::new(),
        })
    }

    /// Reads the text format against a topology: every endpoint must exist
    /// and every printed cost must match the underlay delay to the printed
    /// precision. Costs are recomputed exactly from the topology.
    pub fn parse_for(text: &str, topology: &Topology) -> Result<Self, OverlayError> {
        let (root, raw_edges) = parse_lines(text)?;
        if !topology.contains(root) {
            return Err(OverlayError::UnknownDcr(root));
        }
        let mut edges = BTreeMap::new();
        for (line, a, b, printed) in raw_edges {
            let err = |message: String| OverlayError::Parse { line, message };
            let exact = topology.delay(a, b).map_err(|e| err(e.to_string()))?;
            if (exact - printed).abs() > 1e-6 {
                return Err(err(format!(
                    "edge {a}-{b} cost {printed} does not match underlay delay {exact:.6}"
                )));
            }
            edges.insert(edge_key(a, b), exact);
        }
        Ok(Self {
            root,
            nodes: topology.ids().collect(),
            edges,
            parent: BTreeMap::new(),
            insertion_order: Vec::new(),
        })
    }
}

type RawEdge = (usize, DcrId, DcrId, f64);

fn parse_lines(text: &str) -> Result<(DcrId, Vec<RawEdge>), OverlayError> {
    let mut root = None;
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| OverlayError::Parse {
            line: lineno,
            message,
        };
        let id = |s: &str| {
            s.parse::<u32>()
                .ok()
                .filter(|&v| v > 0)
                .map(DcrId)
                .ok_or_else(|| err(format!("bad DCR id `{s}`")))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["root", r] => {
                if root.is_some() {
                    return Err(err("second `root` line".into()));
                }
                root = Some(id(r)?);
            }
            ["edge", a, b, c] => {
                let (a, b) = (id(a)?, id(b)?);
                if a == b {
                    return Err(err(format!("self loop on {a}")));
                }
                let cost: f64 = c
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| err(format!("bad cost `{c}`")))?;
                if !seen.insert(edge_key(a, b)) {
                    return Err(err(format!("duplicate edge {a}-{b}")));
                }
                edges.push((lineno, a, b, cost));
            }
            _ => return Err(err(format!("unrecognized line `{line}`"))),
        }
    }
    let root = root.ok_or(OverlayError::Parse {
        line: 0,
        message: "missing `root` line".into(),
    })?;
    Ok((root, edges))
}

/// The DCR closest to the center of the bounding box of all DCRs.
pub fn select_root(topology: &Topology) -> DcrId {
    let (min, max) = topology.bounding_box();
    let center = Point::new((min.x + max.x) / 2.0, (min.y + max.y) / 2.0);
    topology.nearest_dcr(center)
}

/// Non-root DCRs sorted by increasing distance from `root`, ties by id.
pub fn insertion_order(topology: &Topology, root: DcrId) -> Vec<DcrId> {
    let origin = topology.pos(root);
    let mut rest: Vec<(f64, DcrId)> = topology
        .dcrs()
        .filter(|&(id, _)| id != root)
        .map(|(id, p)| (distance(origin, p), id))
        .collect();
    rest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    rest.into_iter().map(|(_, id)| id).collect()
}

/// Tree construction with the root chosen by [`select_root`].
pub fn build_tree(topology: &Topology) -> Overlay {
    build_tree_rooted(topology, select_root(topology))
        .expect("selected root belongs to the topology")
}

/// Tree construction grown from an explicit root.
pub fn build_tree_rooted(topology: &Topology, root: DcrId) -> Result<Overlay, OverlayError> {
    topology.position(root)?;
    let mut overlay = Overlay {
        root,
        nodes: topology.ids().collect(),
        edges: BTreeMap::new(),
        parent: BTreeMap::new(),
        insertion_order: vec![root],
    };
    let d = |a: DcrId, b: DcrId| distance(topology.pos(a), topology.pos(b));

    for node in insertion_order(topology, root) {
        let closest = closest_of(
            topology.pos(node),
            overlay
                .insertion_order
                .iter()
                .map(|&id| (id, topology.pos(id))),
        )
        .expect("tree always holds the root");

        let attach = if closest == root {
            closest
        } else {
            let grandparent = overlay.parent[&closest];
            let direct = d(node, grandparent);
            let indirect = d(node, closest) + d(closest, grandparent);
            if indirect >= DETOUR_THRESHOLD * direct {
                grandparent
            } else {
                closest
            }
        };
        overlay.add_edge(node, attach, d(node, attach));
        overlay.parent.insert(node, attach);
        overlay.insertion_order.push(node);
    }
    Ok(overlay)
}

/// Non-root nodes with exactly one tree edge.
pub fn leaf_set(overlay: &Overlay) -> BTreeSet<DcrId> {
    let mut degree: BTreeMap<DcrId, usize> = BTreeMap::new();
    for (&child, &parent) in &overlay.parent {
        *degree.entry(child).or_default() += 1;
        *degree.entry(parent).or_default() += 1;
    }
    degree
        .into_iter()
        .filter(|&(id, deg)| deg == 1 && id != overlay.root)
        .map(|(id, _)| id)
        .collect()
}

/// Polar angle of `p` around `origin`, in `[0, 2π)`.
fn polar_angle(origin: Point, p: Point) -> f64 {
    let a = (p.y - origin.y).atan2(p.x - origin.x);
    if a < 0.0 {
        a + TAU
    } else {
        a
    }
}

/// Leaves in angular order around the root, rotated so that the largest
/// angular gap falls between the last and the first element.
pub fn leaf_chain(overlay: &Overlay, topology: &Topology) -> Vec<DcrId> {
    let origin = topology.pos(overlay.root);
    let mut leaves: Vec<(f64, DcrId)> = leaf_set(overlay)
        .into_iter()
        .map(|id| (polar_angle(origin, topology.pos(id)), id))
        .collect();
    leaves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = leaves.len();
    if n < 2 {
        return leaves.into_iter().map(|(_, id)| id).collect();
    }
    // gap i runs from leaves[i] to leaves[i + 1], wrapping at the end
    let gap = |i: usize| {
        if i + 1 < n {
            leaves[i + 1].0 - leaves[i].0
        } else {
            leaves[0].0 + TAU - leaves[n - 1].0
        }
    };
    let mut widest = 0;
    for i in 1..n {
        if gap(i) > gap(widest) {
            widest = i;
        }
    }
    (0..n).map(|k| leaves[(widest + 1 + k) % n].1).collect()
}

/// Second stage: chain consecutive leaves, leaving the widest angular gap open.
pub fn connect_leaves(overlay: &Overlay, topology: &Topology) -> Overlay {
    let mut out = overlay.clone();
    let chain = leaf_chain(overlay, topology);
    for pair in chain.windows(2) {
        let cost = distance(topology.pos(pair[0]), topology.pos(pair[1]));
        out.add_edge(pair[0], pair[1], cost);
    }
    out
}

/// The pair of DCRs closest to the midpoints of the left and right sides of
/// the bounding box.
pub fn wraparound_pair(topology: &Topology) -> (DcrId, DcrId) {
    let (min, max) = topology.bounding_box();
    let mid_y = (min.y + max.y) / 2.0;
    (
        topology.nearest_dcr(Point::new(min.x, mid_y)),
        topology.nearest_dcr(Point::new(max.x, mid_y)),
    )
}

/// Third stage: connect the west-most and east-most DCRs.
pub fn add_wraparound(overlay: &Overlay, topology: &Topology) -> Overlay {
    let mut out = overlay.clone();
    let (west, east) = wraparound_pair(topology);
    out.add_edge(west, east, distance(topology.pos(west), topology.pos(east)));
    out
}

/// Runs the requested construction stage and everything below it.
pub fn build_overlay(topology: &Topology, algorithm: Algorithm) -> Overlay {
    let tree = build_tree(topology);
    match algorithm {
        Algorithm::Tree => tree,
        Algorithm::LeafChain => connect_leaves(&tree, topology),
        Algorithm::Wraparound => add_wraparound(&connect_leaves(&tree, topology), topology),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then node index
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest path costs plus the predecessor that first reached
/// each node.
fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut pred = vec![None; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        cost: 0.0,
        node: source,
    });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for &(next, w) in &adj[node] {
            let alt = cost + w;
            let better =
                alt < dist[next] || (alt == dist[next] && pred[next].is_some_and(|p| node < p));
            if better {
                dist[next] = alt;
                pred[next] = Some(node);
                heap.push(HeapEntry {
                    cost: alt,
                    node: next,
                });
            }
        }
    }
    (dist, pred)
}

/// Symmetric matrix of shortest-path delays over overlay edges.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrix {
    ids: Vec<DcrId>,
    index: BTreeMap<DcrId, usize>,
    delays: Vec<f64>,
}

impl DelayMatrix {
    pub fn ids(&self) -> &[DcrId] {
        &self.ids
    }

    pub fn get(&self, a: DcrId, b: DcrId) -> Option<f64> {
        let (ia, ib) = (*self.index.get(&a)?, *self.index.get(&b)?);
        Some(self.delays[ia * self.ids.len() + ib])
    }

    /// Delays from `source` to every node.
    pub fn row(&self, source: DcrId) -> Option<BTreeMap<DcrId, f64>> {
        let s = *self.index.get(&source)?;
        let n = self.ids.len();
        Some(
            self.ids
                .iter()
                .enumerate()
                .map(|(t, &id)| (id, self.delays[s * n + t]))
                .collect(),
        )
    }

    /// Values over unordered pairs of distinct nodes.
    pub fn pairs(&self) -> impl Iterator<Item = (DcrId, DcrId, f64)> + '_ {
        let n = self.ids.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).map(move |j| (self.ids[i], self.ids[j], self.delays[i * n + j]))
        })
    }
}

/// Shortest-path delay between every pair of overlay nodes.
pub fn all_pairs_delay(overlay: &Overlay) -> Result<DelayMatrix, OverlayError> {
    let (ids, index, adj) = overlay.adjacency();
    let n = ids.len();
    let mut delays = vec![0.0; n * n];
    for s in 0..n {
        let (dist, _) = dijkstra(&adj, s);
        for (t, &d) in dist.iter().enumerate() {
            if !d.is_finite() {
                return Err(OverlayError::Disconnected(ids[s], ids[t]));
            }
        }
        // keep the matrix exactly symmetric
        for t in s..n {
            delays[s * n + t] = dist[t];
            delays[t * n + s] = dist[t];
        }
    }
    Ok(DelayMatrix { ids, index, delays })
}

/// First-arrival time of a flooded notification at every DCR, with zero
/// processing delay at each hop. This is the source's row of
/// [`all_pairs_delay`].
pub fn flood_schedule(
    overlay: &Overlay,
    source: DcrId,
) -> Result<BTreeMap<DcrId, f64>, OverlayError> {
    if !overlay.nodes.contains(&source) {
        return Err(OverlayError::UnknownDcr(source));
    }
    let matrix = all_pairs_delay(overlay)?;
    Ok(matrix.row(source).expect("source is an overlay node"))
}

/// Message counts of one flood with duplicate suppression: every DCR forwards
/// the first copy it receives to all neighbours except the one it came from,
/// and drops later copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloodStats {
    pub transmissions: usize,
    pub duplicates: usize,
    /// Sum of the link costs of every transmission.
    pub cost: f64,
}

pub fn flood_stats(overlay: &Overlay, source: DcrId) -> Result<FloodStats, OverlayError> {
    let (ids, index, adj) = overlay.adjacency();
    let &s = index.get(&source).ok_or(OverlayError::UnknownDcr(source))?;
    let (dist, pred) = dijkstra(&adj, s);
    if let Some(t) = dist.iter().position(|d| !d.is_finite()) {
        return Err(OverlayError::Disconnected(source, ids[t]));
    }
    let mut transmissions = 0;
    let mut cost = 0.0;
    for (node, links) in adj.iter().enumerate() {
        for &(next, w) in links {
            if pred[node] != Some(next) {
                transmissions += 1;
                cost += w;
            }
        }
    }
    Ok(FloodStats {
        transmissions,
        duplicates: transmissions - (ids.len() - 1),
        cost,
    })
}

/// Delay and overhead figures of an overlay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayMetrics {
    /// Largest shortest-path delay between two DCRs.
    pub worst_delay: f64,
    /// Mean shortest-path delay over unordered pairs of distinct DCRs.
    pub average_delay: f64,
    /// Sum of all edge costs, each edge carrying a notification once.
    pub flooding_overhead: f64,
}

impl fmt::Display for OverlayMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "worst={:.2} avg={:.2} overhead={:.2}",
            self.worst_delay, self.average_delay, self.flooding_overhead
        )
    }
}

pub fn overlay_metrics(overlay: &Overlay) -> Result<OverlayMetrics, OverlayError> {
    let matrix = all_pairs_delay(overlay)?;
    let mut worst = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (_, _, d) in matrix.pairs() {
        worst = worst.max(d);
        sum += d;
        count += 1;
    }
    Ok(OverlayMetrics {
        worst_delay: worst,
        average_delay: if count == 0 { 0.0 } else { sum / count as f64 },
        flooding_overhead: overlay.edges.values().sum(),
    })
}
