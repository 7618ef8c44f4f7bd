//! Peers, overlays and allocations.
//!
//! Node `0` is always the server; peers are numbered `1..=N`. Internally a
//! peer with id `i` lives at index `i - 1` of every per-peer vector.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Absolute tolerance for rate comparisons (bandwidths are normalized so the
/// mean download bandwidth is about 1).
pub const RATE_TOL: f64 = 1e-9;

/// Node id of the server.
pub const SERVER: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub id: usize,
    /// Download bandwidth.
    pub d: f64,
    /// Upload bandwidth, never above `d` once ingested.
    pub u: f64,
    /// Weight in the objective; zero marks a helper.
    pub w: f64,
}

impl PeerSpec {
    pub fn new(id: usize, d: f64, u: f64, w: f64) -> Self {
        PeerSpec { id, d, u, w }
    }
}

#[derive(Deserialize)]
struct RawInstance {
    server_bw: f64,
    peers: Vec<PeerSpec>,
}

/// A server plus its peers, sorted by id with ids exactly `1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct NetworkInstance {
    pub server_bw: f64,
    pub peers: Vec<PeerSpec>,
}

impl TryFrom<RawInstance> for NetworkInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        NetworkInstance::new(raw.server_bw, raw.peers)
    }
}

impl NetworkInstance {
    /// Validates and normalizes an instance. Uploads above the download
    /// bandwidth are clipped to it.
    pub fn new(server_bw: f64, mut peers: Vec<PeerSpec>) -> Result<Self> {
        if !(server_bw.is_finite() && server_bw > 0.0) {
            return Err(validation(format!(
                "server bandwidth must be positive and finite, got {server_bw}"
            )));
        }
        if peers.is_empty() {
            return Err(validation("instance has no peers"));
        }
        for p in &peers {
            for (name, v) in [("d", p.d), ("u", p.u), ("w", p.w)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(validation(format!(
                        "peer {}: {name} must be finite and nonnegative, got {v}",
                        p.id
                    )));
                }
            }
        }
        peers.sort_by_key(|p| p.id);
        for (idx, p) in peers.iter().enumerate() {
            if p.id != idx + 1 {
                return Err(validation(format!(
                    "peer ids must be exactly 1..={}, found id {} at position {}",
                    peers.len(),
                    p.id,
                    idx + 1
                )));
            }
        }
        for p in &mut peers {
            if p.u > p.d {
                p.u = p.d;
            }
        }
        Ok(NetworkInstance { server_bw, peers })
    }

    /// Builds an instance from parallel `d`, `u`, `w` slices; ids are assigned
    /// in order.
    pub fn from_vectors(server_bw: f64, d: &[f64], u: &[f64], w: &[f64]) -> Result<Self> {
        if d.len() != u.len() || d.len() != w.len() {
            return Err(validation("d, u and w must have equal length"));
        }
        let peers = d
            .iter()
            .zip(u)
            .zip(w)
            .enumerate()
            .map(|(i, ((&d, &u), &w))| PeerSpec::new(i + 1, d, u, w))
            .collect();
        NetworkInstance::new(server_bw, peers)
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn peer(&self, id: usize) -> Option<&PeerSpec> {
        id.checked_sub(1).and_then(|i| self.peers.get(i))
    }

    pub fn max_upload(&self) -> f64 {
        self.peers.iter().map(|p| p.u).fold(0.0, f64::max)
    }

    pub fn total_upload(&self) -> f64 {
        self.peers.iter().map(|p| p.u).sum()
    }

    pub fn total_download(&self) -> f64 {
        self.peers.iter().map(|p| p.d).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

#[derive(Serialize, Deserialize)]
struct RawFlowGraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    peers: Option<usize>,
    edges: Vec<Edge>,
}

/// Directed overlay rooted at the server with a transmission rate per edge.
///
/// Only edges with a strictly positive rate take part in topology
/// (reachability, cycles, levels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFlowGraph", into = "RawFlowGraph")]
pub struct FlowGraph {
    peers: usize,
    edges: BTreeMap<(usize, usize), f64>,
}

impl TryFrom<RawFlowGraph> for FlowGraph {
    type Error = Error;

    fn try_from(raw: RawFlowGraph) -> Result<Self> {
        let inferred = raw
            .edges
            .iter()
            .map(|e| e.from.max(e.to))
            .max()
            .unwrap_or(0);
        let peers = raw.peers.unwrap_or(inferred);
        let mut g = FlowGraph::new(peers);
        for e in raw.edges {
            g.add_edge(e.from, e.to, e.rate)?;
        }
        Ok(g)
    }
}

impl From<FlowGraph> for RawFlowGraph {
    fn from(g: FlowGraph) -> Self {
        RawFlowGraph {
            peers: Some(g.peers),
            edges: g.edges().collect(),
        }
    }
}

impl FlowGraph {
    pub fn new(peers: usize) -> Self {
        FlowGraph {
            peers,
            edges: BTreeMap::new(),
        }
    }

    /// Adds `rate` to the edge `from -> to`. Parallel edges accumulate.
    pub fn add_edge(&mut self, from: usize, to: usize, rate: f64) -> Result<()> {
        if from == to {
            return Err(validation(format!("self loop on node {from}")));
        }
        if to == SERVER {
            return Err(validation(format!("edge {from} -> 0 points at the server")));
        }
        if from > self.peers || to > self.peers {
            return Err(Error::Structural(format!(
                "edge {from} -> {to} references a node outside 0..={}",
                self.peers
            )));
        }
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(validation(format!(
                "edge {from} -> {to}: rate must be finite and nonnegative, got {rate}"
            )));
        }
        *self.edges.entry((from, to)).or_insert(0.0) += rate;
        Ok(())
    }

    pub fn with_edges(peers: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut g = FlowGraph::new(peers);
        for &(f, t, r) in edges {
            g.add_edge(f, t, r)?;
        }
        Ok(g)
    }

    pub fn peer_count(&self) -> usize {
        self.peers
    }

    pub fn node_count(&self) -> usize {
        self.peers + 1
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.edges.get(&(from, to)).copied().unwrap_or(0.0)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges
            .iter()
            .map(|(&(from, to), &rate)| Edge { from, to, rate })
    }

    /// Out-neighbours over positive-rate edges, ascending, for every node.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for (&(f, t), &r) in &self.edges {
            if r > 0.0 {
                adj[f].push(t);
            }
        }
        adj
    }

    /// Total rate into each node (index 0 is the server and stays 0).
    pub fn inflow(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.node_count()];
        for (&(_, t), &r) in &self.edges {
            v[t] += r;
        }
        v
    }

    /// Total rate out of each node.
    pub fn outflow(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.node_count()];
        for (&(f, _), &r) in &self.edges {
            v[f] += r;
        }
        v
    }

    /// Nodes reachable from the server along positive-rate edges.
    pub fn reachable(&self) -> Vec<bool> {
        let adj = self.successors();
        let mut seen = vec![false; self.node_count()];
        seen[SERVER] = true;
        let mut queue = VecDeque::from([SERVER]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Kahn topological order over all nodes, or the first node left on a
    /// cycle.
    pub fn topological_order(&self) -> std::result::Result<Vec<usize>, usize> {
        let adj = self.successors();
        let mut indeg = vec![0usize; self.node_count()];
        for succ in &adj {
            for &w in succ {
                indeg[w] += 1;
            }
        }
        let mut queue: VecDeque<usize> =
            (0..self.node_count()).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.node_count());
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        if order.len() == self.node_count() {
            Ok(order)
        } else {
            Err((0..self.node_count()).find(|&v| indeg[v] > 0).unwrap_or(0))
        }
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_ok()
    }
}

/// Level of every peer (server fixed at level 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelAssignment {
    levels: Vec<usize>,
    max_level: usize,
}

#[derive(Serialize, Deserialize)]
struct RawAssignment {
    levels: Vec<Vec<usize>>,
}

impl Serialize for LevelAssignment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawAssignment {
            levels: self.groups(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LevelAssignment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawAssignment::deserialize(d)?;
        let n = raw.levels.iter().map(Vec::len).sum();
        LevelAssignment::from_groups(n, &raw.levels).map_err(serde::de::Error::custom)
    }
}

impl LevelAssignment {
    /// `levels[i]` is the level of peer `i + 1`; every entry must be `>= 1`.
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(validation("level assignment is empty"));
        }
        if let Some(pos) = levels.iter().position(|&l| l == 0) {
            return Err(validation(format!("peer {} assigned level 0", pos + 1)));
        }
        let max_level = *levels.iter().max().unwrap_or(&0);
        Ok(LevelAssignment { levels, max_level })
    }

    /// Builds an assignment from per-level groups of peer ids (group `k` is
    /// level `k + 1`). Every peer `1..=n` must appear exactly once.
    pub fn from_groups(n: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut levels = vec![0usize; n];
        for (k, group) in groups.iter().enumerate() {
            for &id in group {
                if id == 0 || id > n {
                    return Err(validation(format!("peer id {id} outside 1..={n}")));
                }
                if levels[id - 1] != 0 {
                    return Err(validation(format!("peer {id} assigned twice")));
                }
                levels[id - 1] = k + 1;
            }
        }
        if let Some(pos) = levels.iter().position(|&l| l == 0) {
            return Err(validation(format!("peer {} has no level", pos + 1)));
        }
        LevelAssignment::new(levels)
    }

    pub fn level(&self, id: usize) -> usize {
        self.levels[id - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.levels
    }

    /// Number of levels `K`.
    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn peer_count(&self) -> usize {
        self.levels.len()
    }

    /// `N_j` for `j = 1..=K` (index 0 is level 1).
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.max_level];
        for &l in &self.levels {
            sizes[l - 1] += 1;
        }
        sizes
    }

    /// Peer ids per level, ascending within a level.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.max_level];
        for (i, &l) in self.levels.iter().enumerate() {
            groups[l - 1].push(i + 1);
        }
        groups
    }
}

/// Total download rate per peer (index `i` is peer `i + 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateAllocation(pub Vec<f64>);

impl RateAllocation {
    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    /// Checks `0 <= r_i <= d_i` within [`RATE_TOL`].
    pub fn check(&self, inst: &NetworkInstance) -> Result<()> {
        if self.0.len() != inst.len() {
            return Err(Error::Structural(format!(
                "allocation has {} rates for {} peers",
                self.0.len(),
                inst.len()
            )));
        }
        for (r, p) in self.0.iter().zip(&inst.peers) {
            if !r.is_finite() || *r < -RATE_TOL || *r > p.d + RATE_TOL {
                return Err(validation(format!(
                    "peer {}: rate {r} outside [0, {}]",
                    p.id, p.d
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaxonomyClass {
    NotStaticP2P,
    StaticP2P,
    Hierarchical,
    StrictlyHierarchical,
}

impl TaxonomyClass {
    pub fn is_hierarchical(self) -> bool {
        self >= TaxonomyClass::Hierarchical
    }
}

impl fmt::Display for TaxonomyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaxonomyClass::NotStaticP2P => "not-static-p2p",
            TaxonomyClass::StaticP2P => "static-p2p",
            TaxonomyClass::Hierarchical => "hierarchical",
            TaxonomyClass::StrictlyHierarchical => "strictly-hierarchical",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Download {
        peer: usize,
        inflow: f64,
        limit: f64,
    },
    Upload {
        peer: usize,
        outflow: f64,
        limit: f64,
    },
    Server {
        outflow: f64,
        limit: f64,
    },
    Unreachable {
        peer: usize,
    },
}

/// Lists every violated overlay constraint; an empty list means `g` is a
/// valid flow graph for `inst`.
pub fn validate_flow_graph(g: &FlowGraph, inst: &NetworkInstance) -> Result<Vec<Violation>> {
    if g.peer_count() != inst.len() {
        return Err(Error::Structural(format!(
            "graph has {} peers, instance has {}",
            g.peer_count(),
            inst.len()
        )));
    }
    let inflow = g.inflow();
    let outflow = g.outflow();
    let mut report = Vec::new();
    if outflow[SERVER] > inst.server_bw + RATE_TOL {
        report.push(Violation::Server {
            outflow: outflow[SERVER],
            limit: inst.server_bw,
        });
    }
    for p in &inst.peers {
        if inflow[p.id] > p.d + RATE_TOL {
            report.push(Violation::Download {
                peer: p.id,
                inflow: inflow[p.id],
                limit: p.d,
            });
        }
        if outflow[p.id] > p.u + RATE_TOL {
            report.push(Violation::Upload {
                peer: p.id,
                outflow: outflow[p.id],
                limit: p.u,
            });
        }
    }
    let seen = g.reachable();
    for (id, _) in seen.iter().enumerate().skip(1).filter(|(_, &ok)| !ok) {
        report.push(Violation::Unreachable { peer: id });
    }
    Ok(report)
}

/// Longest-path level of every peer.
///
/// Fails with [`Error::CyclicGraph`] on cyclic input and with a validation
/// error if some peer cannot be reached from the server.
pub fn compute_levels(g: &FlowGraph) -> Result<LevelAssignment> {
    let order = g
        .topological_order()
        .map_err(|node| Error::CyclicGraph { node })?;
    let adj = g.successors();
    let mut dist: Vec<Option<usize>> = vec![None; g.node_count()];
    dist[SERVER] = Some(0);
    for &v in &order {
        let Some(dv) = dist[v] else { continue };
        for &w in &adj[v] {
            if dist[w].is_none_or(|dw| dw < dv + 1) {
                dist[w] = Some(dv + 1);
            }
        }
    }
    let levels = (1..g.node_count())
        .map(|id| {
            dist[id].ok_or_else(|| validation(format!("peer {id} is unreachable from the server")))
        })
        .collect::<Result<Vec<_>>>()?;
    LevelAssignment::new(levels)
}

pub fn classify(g: &FlowGraph) -> TaxonomyClass {
    if g.reachable().iter().any(|&r| !r) {
        return TaxonomyClass::NotStaticP2P;
    }
    let Ok(levels) = compute_levels(g) else {
        return TaxonomyClass::StaticP2P;
    };
    let level_of = |v: usize| if v == SERVER { 0 } else { levels.level(v) };
    let strict = g
        .edges()
        .filter(|e| e.rate > 0.0)
        .all(|e| level_of(e.to) == level_of(e.from) + 1);
    if strict {
        TaxonomyClass::StrictlyHierarchical
    } else {
        TaxonomyClass::Hierarchical
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(with = "crate::serde_f64")]
    pub wadt: f64,
    pub bandwidth_usage: f64,
}

/// Weighted average download time `sum w_i / r_i`; `+inf` when a peer with
/// positive weight gets no rate.
pub fn wadt(rates: &[f64], inst: &NetworkInstance) -> f64 {
    rates
        .iter()
        .zip(&inst.peers)
        .filter(|(_, p)| p.w > 0.0)
        .map(|(&r, p)| if r > 0.0 { p.w / r } else { f64::INFINITY })
        .sum()
}

pub fn metrics(alloc: &RateAllocation, inst: &NetworkInstance) -> Metrics {
    let total_d = inst.total_download();
    let usage = if total_d > 0.0 {
        alloc.0.iter().sum::<f64>() / total_d
    } else {
        0.0
    };
    Metrics {
        wadt: wadt(&alloc.0, inst),
        bandwidth_usage: usage,
    }
}

/// `r_i = u_i` (Method 6) and `r_i = d_i` (Method 7, infeasible benchmark).
pub fn trivial_allocations(inst: &NetworkInstance) -> (RateAllocation, RateAllocation) {
    (
        RateAllocation(inst.peers.iter().map(|p| p.u).collect()),
        RateAllocation(inst.peers.iter().map(|p| p.d).collect()),
    )
}
