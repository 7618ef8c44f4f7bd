//! Decomposition of a static P2P network into an equivalent strictly
//! hierarchical network of sub-peers.
//!
//! Peer `i` is cut into one sub-peer per level `k` at which a simple path of
//! length `k` from the server reaches it. Rates are then pushed level by
//! level: each sub-peer forwards its download to its children in ascending
//! peer order, never more than the original edge still has unassigned.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::model::{FlowGraph, NetworkInstance, PeerSpec, RATE_TOL, SERVER};

/// Default cap on the peer count for exhaustive simple-path enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubPeerId {
    pub peer: usize,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLengthSets {
    /// `sets[i]` holds the simple-path lengths reaching peer `i + 1`.
    pub sets: Vec<BTreeSet<usize>>,
    /// Largest length over all peers.
    pub max_len: usize,
}

impl PathLengthSets {
    pub fn of(&self, peer: usize) -> &BTreeSet<usize> {
        &self.sets[peer - 1]
    }
}

/// Sub-peer children: `(i, k) -> j` means an edge `(i, k) -> (j, k + 1)`.
type SubEdgeSet = BTreeSet<(usize, usize, usize)>;

fn require_reachable(g: &FlowGraph) -> Result<()> {
    if let Some(id) = g.reachable().iter().position(|&r| !r) {
        return Err(validation(format!(
            "peer {id} is unreachable from the server"
        )));
    }
    Ok(())
}

/// Path lengths by dynamic programming over a topological order. Only valid
/// for acyclic graphs, where every path is simple.
fn path_lengths_dag(g: &FlowGraph, order: &[usize]) -> (Vec<BTreeSet<usize>>, SubEdgeSet) {
    let adj = g.successors();
    let mut sets = vec![BTreeSet::new(); g.node_count()];
    sets[SERVER].insert(0);
    let mut sub_edges = SubEdgeSet::new();
    for &v in order {
        let lengths: Vec<usize> = sets[v].iter().copied().collect();
        for &w in &adj[v] {
            for &k in &lengths {
                sets[w].insert(k + 1);
                if v != SERVER {
                    sub_edges.insert((v, k, w));
                }
            }
        }
    }
    (sets, sub_edges)
}

/// Exhaustive depth-first enumeration of simple paths from the server.
fn path_lengths_enumerated(g: &FlowGraph) -> (Vec<BTreeSet<usize>>, SubEdgeSet) {
    fn walk(
        v: usize,
        depth: usize,
        adj: &[Vec<usize>],
        on_path: &mut [bool],
        sets: &mut [BTreeSet<usize>],
        sub_edges: &mut SubEdgeSet,
    ) {
        sets[v].insert(depth);
        for &w in &adj[v] {
            if on_path[w] {
                continue;
            }
            if v != SERVER {
                sub_edges.insert((v, depth, w));
            }
            on_path[w] = true;
            walk(w, depth + 1, adj, on_path, sets, sub_edges);
            on_path[w] = false;
        }
    }
    let adj = g.successors();
    let mut sets = vec![BTreeSet::new(); g.node_count()];
    let mut on_path = vec![false; g.node_count()];
    let mut sub_edges = SubEdgeSet::new();
    on_path[SERVER] = true;
    walk(SERVER, 0, &adj, &mut on_path, &mut sets, &mut sub_edges);
    (sets, sub_edges)
}

fn finish(mut sets: Vec<BTreeSet<usize>>) -> PathLengthSets {
    let peer_sets: Vec<BTreeSet<usize>> = sets.drain(1..).collect();
    let max_len = peer_sets
        .iter()
        .filter_map(|s| s.iter().next_back().copied())
        .max()
        .unwrap_or(0);
    PathLengthSets {
        sets: peer_sets,
        max_len,
    }
}

fn path_data(g: &FlowGraph, cap: usize) -> Result<(PathLengthSets, SubEdgeSet)> {
    require_reachable(g)?;
    let (sets, edges) = match g.topological_order() {
        Ok(order) => path_lengths_dag(g, &order),
        Err(_) => {
            if g.peer_count() > cap {
                return Err(Error::Resource(format!(
                    "simple-path enumeration on a cyclic graph is capped at {cap} peers, graph has {}",
                    g.peer_count()
                )));
            }
            path_lengths_enumerated(g)
        }
    };
    Ok((finish(sets), edges))
}

/// Sets of achievable simple-path lengths from the server to every peer.
///
/// Acyclic graphs use a dynamic program; cyclic graphs fall back to
/// exhaustive enumeration, refused above `cap` peers.
pub fn path_length_sets(g: &FlowGraph, cap: usize) -> Result<PathLengthSets> {
    path_data(g, cap).map(|(sets, _)| sets)
}

/// Always enumerates, regardless of cycles. Exposed as the reference the
/// dynamic program is checked against.
pub fn path_length_sets_enumerated(g: &FlowGraph, cap: usize) -> Result<PathLengthSets> {
    require_reachable(g)?;
    if g.peer_count() > cap {
        return Err(Error::Resource(format!(
            "simple-path enumeration is capped at {cap} peers, graph has {}",
            g.peer_count()
        )));
    }
    Ok(finish(path_lengths_enumerated(g).0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPeer {
    pub peer: usize,
    pub level: usize,
    pub d: f64,
    pub u: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubEdge {
    /// `[peer, level]`; the server is `[0, 0]`.
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPeerNetwork {
    /// `levels[k]` holds the sub-peers of level `k + 1`, ascending by peer.
    pub levels: Vec<Vec<SubPeer>>,
    pub edges: Vec<SubEdge>,
    /// `S_0 = S` then `S_k = sum_i min(u_{i,k}, r_{i,k})`.
    pub virtual_server: Vec<f64>,
    /// Whole-peer bandwidths the splits must add up to.
    pub peers: Vec<PeerSpec>,
}

impl SubPeerNetwork {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn sub_peer_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    fn refresh_virtual_server(&mut self, server_bw: f64) {
        self.virtual_server = std::iter::once(server_bw)
            .chain(
                self.levels
                    .iter()
                    .map(|level| level.iter().map(|s| s.u.min(s.r)).sum()),
            )
            .collect();
    }

    /// Per-peer total download rate.
    pub fn peer_rates(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.peers.len()];
        for s in self.levels.iter().flatten() {
            r[s.peer - 1] += s.r;
        }
        r
    }

    /// The sub-peer overlay as a flow graph over sub-peers with positive
    /// download. Node ids are assigned level by level; the returned vector
    /// maps node id `n` to `ids[n - 1]`.
    pub fn to_flow_graph(&self) -> Result<(FlowGraph, Vec<SubPeerId>)> {
        let ids: Vec<SubPeerId> = self
            .levels
            .iter()
            .flatten()
            .filter(|s| s.r > 0.0)
            .map(|s| SubPeerId {
                peer: s.peer,
                level: s.level,
            })
            .collect();
        let node: BTreeMap<(usize, usize), usize> = ids
            .iter()
            .enumerate()
            .map(|(n, id)| ((id.peer, id.level), n + 1))
            .collect();
        let mut g = FlowGraph::new(ids.len());
        for e in self.edges.iter().filter(|e| e.rate > 0.0) {
            let from = if e.from.0 == SERVER {
                Some(SERVER)
            } else {
                node.get(&e.from).copied()
            };
            let to = node.get(&e.to).copied();
            match (from, to) {
                (Some(f), Some(t)) => g.add_edge(f, t, e.rate)?,
                _ => {
                    return Err(Error::Structural(format!(
                        "edge {:?} -> {:?} touches a sub-peer without download",
                        e.from, e.to
                    )))
                }
            }
        }
        Ok((g, ids))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    /// Give every peer a sub-peer at every level and connect every pair of
    /// consecutive levels, allowing zero-rate sub-peers and edges. Needs no
    /// path enumeration.
    pub full_division: bool,
    pub enumeration_cap: usize,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions {
            full_division: false,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Builds an equivalent strictly hierarchical network of sub-peers.
pub fn decompose(
    g: &FlowGraph,
    inst: &NetworkInstance,
    opts: DecomposeOptions,
) -> Result<SubPeerNetwork> {
    if g.peer_count() != inst.len() {
        return Err(Error::Structural(format!(
            "graph has {} peers, instance has {}",
            g.peer_count(),
            inst.len()
        )));
    }
    require_reachable(g)?;
    let outflow = g.outflow();
    let inflow = g.inflow();
    for p in &inst.peers {
        if inflow[p.id] > p.d + RATE_TOL || outflow[p.id] > p.u + RATE_TOL {
            return Err(validation(format!(
                "peer {} violates its bandwidth (in {}, out {})",
                p.id, inflow[p.id], outflow[p.id]
            )));
        }
    }

    let assignment = if opts.full_division {
        assign_full_division(g)?
    } else {
        let (sets, sub_edges) = path_data(g, opts.enumeration_cap)?;
        assign_rates(g, &sets, &sub_edges)?
    };
    Ok(split_bandwidth(assignment, inst))
}

struct RateAssignment {
    /// Download rate per `(peer, level)`.
    rates: BTreeMap<(usize, usize), f64>,
    /// `(from_peer, from_level, to_peer) -> rate`; from `(0, 0)` is the server.
    edges: BTreeMap<(usize, usize, usize), f64>,
    levels: usize,
}

/// Pushes every level's download to the next level, children in ascending
/// order, capped by what each original edge still has unassigned.
fn push_level(
    k: usize,
    rates: &mut BTreeMap<(usize, usize), f64>,
    edges: &mut BTreeMap<(usize, usize, usize), f64>,
    residue: &mut BTreeMap<(usize, usize), f64>,
    children: impl Fn(usize) -> Vec<usize>,
) {
    let parents: Vec<(usize, f64)> = rates
        .range((0, k)..)
        .filter(|(&(_, level), _)| level == k)
        .map(|(&(peer, _), &r)| (peer, r))
        .collect();
    for (i, download) in parents {
        let mut left = download;
        for j in children(i) {
            let unassigned = residue.get(&(i, j)).copied().unwrap_or(0.0);
            let rate = left.min(unassigned).max(0.0);
            edges.insert((i, k, j), rate);
            if rate > 0.0 {
                left -= rate;
                *residue.get_mut(&(i, j)).expect("positive residue exists") -= rate;
                *rates.entry((j, k + 1)).or_insert(0.0) += rate;
            } else {
                rates.entry((j, k + 1)).or_insert(0.0);
            }
        }
    }
}

fn peer_residue(g: &FlowGraph) -> BTreeMap<(usize, usize), f64> {
    g.edges()
        .filter(|e| e.from != SERVER && e.rate > 0.0)
        .map(|e| ((e.from, e.to), e.rate))
        .collect()
}

fn check_residue(residue: &BTreeMap<(usize, usize), f64>) -> Result<()> {
    if let Some((&(i, j), &left)) = residue.iter().find(|(_, &r)| r > RATE_TOL) {
        return Err(Error::InfeasibleConstruction(format!(
            "rate {left} on edge {i} -> {j} was never assigned: peer {i} uploads more than it downloads"
        )));
    }
    Ok(())
}

/// Sub-peer rates keyed by `(peer, level)` and sub-edge rates keyed by
/// `(from peer, from level, to peer)`.
type LevelRates = (
    BTreeMap<(usize, usize), f64>,
    BTreeMap<(usize, usize, usize), f64>,
);

fn server_level(g: &FlowGraph, all_peers: bool) -> LevelRates {
    let mut rates = BTreeMap::new();
    let mut edges = BTreeMap::new();
    for j in 1..=g.peer_count() {
        let r = g.rate(SERVER, j);
        if r > 0.0 || all_peers {
            rates.insert((j, 1), r);
            edges.insert((SERVER, 0, j), r);
        }
    }
    (rates, edges)
}

fn assign_rates(
    g: &FlowGraph,
    sets: &PathLengthSets,
    sub_edges: &SubEdgeSet,
) -> Result<RateAssignment> {
    let (mut rates, mut edges) = server_level(g, false);
    // sub-peers exist for every reachable length even if they receive nothing
    for (idx, lengths) in sets.sets.iter().enumerate() {
        for &k in lengths {
            rates.entry((idx + 1, k)).or_insert(0.0);
        }
    }
    let mut residue = peer_residue(g);
    for k in 1..sets.max_len {
        let children = |i: usize| -> Vec<usize> {
            sub_edges
                .range((i, k, 0)..=(i, k, usize::MAX))
                .map(|&(_, _, j)| j)
                .collect()
        };
        push_level(k, &mut rates, &mut edges, &mut residue, children);
    }
    check_residue(&residue)?;
    Ok(RateAssignment {
        rates,
        edges,
        levels: sets.max_len,
    })
}

fn assign_full_division(g: &FlowGraph) -> Result<RateAssignment> {
    let n = g.peer_count();
    let (mut rates, mut edges) = server_level(g, true);
    let mut residue = peer_residue(g);
    let mut levels = 1;
    let cap = n + residue.len();
    while levels < cap && residue.values().any(|&r| r > RATE_TOL) {
        let children = |i: usize| -> Vec<usize> { (1..=n).filter(|&j| j != i).collect() };
        push_level(levels, &mut rates, &mut edges, &mut residue, children);
        levels += 1;
    }
    check_residue(&residue)?;
    // trim trailing levels that carry nothing
    while levels > 1
        && rates
            .iter()
            .filter(|(&(_, l), _)| l == levels)
            .all(|(_, &r)| r <= 0.0)
    {
        rates.retain(|&(_, l), _| l != levels);
        edges.retain(|&(_, l, _), _| l + 1 != levels);
        levels -= 1;
    }
    Ok(RateAssignment {
        rates,
        edges,
        levels,
    })
}

/// Splits every peer's bandwidth over its sub-peers. All but the highest
/// sub-peer get `d = r` and an upload between their outflow and `r`; the
/// highest one takes the remainder.
fn split_bandwidth(a: RateAssignment, inst: &NetworkInstance) -> SubPeerNetwork {
    let mut out = BTreeMap::<(usize, usize), f64>::new();
    for (&(i, k, _), &rate) in &a.edges {
        if i != SERVER {
            *out.entry((i, k)).or_insert(0.0) += rate;
        }
    }
    let mut levels: Vec<Vec<SubPeer>> = vec![Vec::new(); a.levels];
    for p in &inst.peers {
        let subs: Vec<(usize, f64)> = a
            .rates
            .range((p.id, 0)..=(p.id, usize::MAX))
            .map(|(&(_, k), &r)| (k, r))
            .collect();
        let outflow_total: f64 = subs
            .iter()
            .map(|(k, _)| out.get(&(p.id, *k)).copied().unwrap_or(0.0))
            .sum();
        let mut spare_upload = (p.u - outflow_total).max(0.0);
        let mut d_used = 0.0;
        let mut u_used = 0.0;
        let last = subs.len().saturating_sub(1);
        for (pos, &(k, r)) in subs.iter().enumerate() {
            let o = out.get(&(p.id, k)).copied().unwrap_or(0.0);
            let (d, u) = if pos == last {
                ((p.d - d_used).max(0.0), (p.u - u_used).max(0.0))
            } else {
                let extra = (r - o).max(0.0).min(spare_upload);
                spare_upload -= extra;
                (r, o + extra)
            };
            d_used += d;
            u_used += u;
            levels[k - 1].push(SubPeer {
                peer: p.id,
                level: k,
                d,
                u,
                r,
            });
        }
    }
    let edges = a
        .edges
        .iter()
        .map(|(&(i, k, j), &rate)| SubEdge {
            from: (i, k),
            to: (j, k + 1),
            rate,
        })
        .collect();
    let mut sp = SubPeerNetwork {
        levels,
        edges,
        virtual_server: Vec::new(),
        peers: inst.peers.clone(),
    };
    sp.refresh_virtual_server(inst.server_bw);
    sp
}

/// Checks that `sp` is a valid strictly hierarchical sub-peer network whose
/// per-pair rates reproduce `g`.
pub fn verify_equivalence(g: &FlowGraph, sp: &SubPeerNetwork) -> bool {
    let tol = RATE_TOL;
    let n = g.peer_count();
    if sp.peers.len() != n {
        return false;
    }
    let mut index = BTreeMap::<(usize, usize), &SubPeer>::new();
    for (k, level) in sp.levels.iter().enumerate() {
        for s in level {
            let sane = [s.d, s.u, s.r].iter().all(|v| v.is_finite() && *v >= -tol);
            if !sane || s.level != k + 1 || s.peer == 0 || s.peer > n {
                return false;
            }
            if s.u > s.d + tol || s.r > s.d + tol {
                return false;
            }
            if index.insert((s.peer, s.level), s).is_some() {
                return false;
            }
        }
    }
    for p in &sp.peers {
        let (d, u) = index
            .range((p.id, 0)..=(p.id, usize::MAX))
            .fold((0.0, 0.0), |(d, u), (_, s)| (d + s.d, u + s.u));
        if (d - p.d).abs() > tol || (u - p.u).abs() > tol {
            return false;
        }
    }

    let mut inflow = BTreeMap::<(usize, usize), f64>::new();
    let mut outflow = BTreeMap::<(usize, usize), f64>::new();
    let mut pair = BTreeMap::<(usize, usize), f64>::new();
    for e in &sp.edges {
        let (fi, fk) = e.from;
        let (ti, tk) = e.to;
        if !(e.rate.is_finite() && e.rate >= -tol) || tk != fk + 1 || ti == SERVER || fi == ti {
            return false;
        }
        if (fi == SERVER) != (fk == 0) || !index.contains_key(&(ti, tk)) {
            return false;
        }
        if fi != SERVER && !index.contains_key(&(fi, fk)) {
            return false;
        }
        *inflow.entry(e.to).or_insert(0.0) += e.rate;
        *outflow.entry(e.from).or_insert(0.0) += e.rate;
        *pair.entry((fi, ti)).or_insert(0.0) += e.rate;
    }
    for (&key, s) in &index {
        let i = inflow.get(&key).copied().unwrap_or(0.0);
        let o = outflow.get(&key).copied().unwrap_or(0.0);
        if (i - s.r).abs() > tol || o > s.r + tol || o > s.u + tol {
            return false;
        }
    }
    let original: BTreeMap<(usize, usize), f64> = g
        .edges()
        .filter(|e| e.rate > 0.0)
        .map(|e| ((e.from, e.to), e.rate))
        .collect();
    let keys: BTreeSet<(usize, usize)> = original.keys().chain(pair.keys()).copied().collect();
    keys.into_iter().all(|key| {
        let a = original.get(&key).copied().unwrap_or(0.0);
        let b = pair.get(&key).copied().unwrap_or(0.0);
        (a - b).abs() <= tol
    })
}

/// Moves every peer's unused bandwidth to the last level: below the last
/// level each sub-peer keeps `d = r` and `u = min(u, r)`. Rates are untouched.
pub fn compact_rates(sp: &SubPeerNetwork) -> SubPeerNetwork {
    let top = sp.level_count();
    let mut out = sp.clone();
    if top == 0 {
        return out;
    }
    for p in &sp.peers {
        let mut d_used = 0.0;
        let mut u_used = 0.0;
        for level in out.levels.iter_mut().take(top - 1) {
            if let Some(s) = level.iter_mut().find(|s| s.peer == p.id) {
                s.u = s.u.min(s.r);
                s.d = s.r;
                d_used += s.d;
                u_used += s.u;
            }
        }
        let d_rest = (p.d - d_used).max(0.0);
        let u_rest = (p.u - u_used).max(0.0);
        let last = &mut out.levels[top - 1];
        match last.iter_mut().find(|s| s.peer == p.id) {
            Some(s) => {
                s.d = d_rest;
                s.u = u_rest;
            }
            None if d_rest > 0.0 || u_rest > 0.0 => {
                let at = last.partition_point(|s| s.peer < p.id);
                last.insert(
                    at,
                    SubPeer {
                        peer: p.id,
                        level: top,
                        d: d_rest,
                        u: u_rest,
                        r: 0.0,
                    },
                );
            }
            None => {}
        }
    }
    let server_bw = sp.virtual_server.first().copied().unwrap_or(0.0);
    out.refresh_virtual_server(server_bw);
    out
}
