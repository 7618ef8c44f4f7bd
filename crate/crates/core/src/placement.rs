//! Peer placement: turning a target rate vector into levels of sub-peers.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::model::{LevelAssignment, NetworkInstance, RateAllocation, RATE_TOL};
use crate::waterfill::{evaluate_level_assignment, upper_bound, LevelEvaluation};

/// Slack on the remaining-budget test so rounding cannot force a split.
const BUDGET_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Whole,
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedPart {
    pub peer: usize,
    pub part: PartKind,
    pub rate: f64,
    pub upload: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPeerPlacement {
    pub levels: Vec<Vec<PlacedPart>>,
    pub splits: usize,
    /// Bandwidth feeding each level: `S` for level 1, then the upload of the
    /// previous level.
    pub incoming: Vec<f64>,
}

impl SubPeerPlacement {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// `S_0 = S` followed by the upload sum of every level.
    pub fn virtual_server(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.levels.len() + 1);
        out.push(self.incoming.first().copied().unwrap_or(0.0));
        out.extend(
            self.levels
                .iter()
                .map(|level| level.iter().map(|p| p.upload).sum::<f64>()),
        );
        out
    }

    /// Level of every peer's whole part, or of its first part when split.
    /// Empty levels are dropped.
    pub fn collapse(&self, peer_count: usize) -> Result<LevelAssignment> {
        let groups: Vec<Vec<usize>> = self
            .levels
            .iter()
            .map(|level| {
                level
                    .iter()
                    .filter(|p| p.part != PartKind::Second)
                    .map(|p| p.peer)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        LevelAssignment::from_groups(peer_count, &groups)
    }
}

/// Which peer the placement loop picks next.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementOrder {
    #[default]
    DescRate,
    AscRate,
    Id,
    SeededRandom(u64),
}

impl fmt::Display for PlacementOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementOrder::DescRate => f.write_str("desc-rate"),
            PlacementOrder::AscRate => f.write_str("asc-rate"),
            PlacementOrder::Id => f.write_str("id"),
            PlacementOrder::SeededRandom(seed) => write!(f, "seeded-random:{seed}"),
        }
    }
}

impl FromStr for PlacementOrder {
    type Err = Error;

    /// `desc-rate`, `asc-rate`, `id`, `seeded-random` or `seeded-random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desc-rate" => Ok(PlacementOrder::DescRate),
            "asc-rate" => Ok(PlacementOrder::AscRate),
            "id" => Ok(PlacementOrder::Id),
            "seeded-random" => Ok(PlacementOrder::SeededRandom(0)),
            other => other
                .strip_prefix("seeded-random:")
                .and_then(|seed| seed.parse().ok())
                .map(PlacementOrder::SeededRandom)
                .ok_or_else(|| validation(format!("unknown placement order {other:?}"))),
        }
    }
}

fn visit_order(rates: &[f64], order: PlacementOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rates.len()).collect();
    match order {
        PlacementOrder::Id => {}
        PlacementOrder::DescRate => {
            idx.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]).then(a.cmp(&b)))
        }
        PlacementOrder::AscRate => {
            idx.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)))
        }
        PlacementOrder::SeededRandom(seed) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Greedy level filling with at most one split per closed level.
///
/// The current level takes peers while the remaining budget covers their
/// target rate. A peer that does not fit is split: the first part takes what
/// is left, the second part opens the next level, whose budget is the upload
/// of the closed level minus the second part.
pub fn place_peers(
    inst: &NetworkInstance,
    target: &RateAllocation,
    order: PlacementOrder,
) -> Result<SubPeerPlacement> {
    if target.0.len() != inst.len() {
        return Err(Error::Structural(format!(
            "{} target rates for {} peers",
            target.0.len(),
            inst.len()
        )));
    }
    for (r, p) in target.0.iter().zip(&inst.peers) {
        if !r.is_finite() || *r < p.u - RATE_TOL || *r > p.d + RATE_TOL {
            return Err(validation(format!(
                "peer {}: target rate {r} outside [u, d] = [{}, {}]",
                p.id, p.u, p.d
            )));
        }
    }

    let mut levels: Vec<Vec<PlacedPart>> = vec![Vec::new()];
    let mut incoming = vec![inst.server_bw];
    let mut splits = 0;
    let mut remaining = inst.server_bw;
    for i in visit_order(&target.0, order) {
        let peer = &inst.peers[i];
        let rate = target.0[i];
        if remaining >= rate - BUDGET_SLACK {
            levels
                .last_mut()
                .expect("at least one level")
                .push(PlacedPart {
                    peer: peer.id,
                    part: PartKind::Whole,
                    rate,
                    upload: peer.u,
                });
            remaining = (remaining - rate).max(0.0);
        } else {
            let first_rate = remaining;
            let second_rate = rate - first_rate;
            let first_upload = peer.u.min(first_rate);
            let second_upload = peer.u - first_upload;
            let current = levels.last_mut().expect("at least one level");
            current.push(PlacedPart {
                peer: peer.id,
                part: PartKind::First,
                rate: first_rate,
                upload: first_upload,
            });
            let closed_upload: f64 = current.iter().map(|p| p.upload).sum();
            incoming.push(closed_upload);
            levels.push(vec![PlacedPart {
                peer: peer.id,
                part: PartKind::Second,
                rate: second_rate,
                upload: second_upload,
            }]);
            splits += 1;
            remaining = closed_upload - second_rate;
            if remaining < -RATE_TOL {
                return Err(Error::InfeasibleConstruction(format!(
                    "level {} uploads {closed_upload} but peer {} still needs {second_rate}",
                    levels.len() - 1,
                    peer.id
                )));
            }
            remaining = remaining.max(0.0);
        }
    }
    Ok(SubPeerPlacement {
        levels,
        splits,
        incoming,
    })
}

/// Shuffles the peers with a seeded stream and cuts them into `k`
/// consecutive groups whose sizes differ by at most one.
pub fn random_placement(inst: &NetworkInstance, k: usize, seed: u64) -> Result<LevelAssignment> {
    let n = inst.len();
    if k == 0 || k > n {
        return Err(validation(format!("level count {k} outside 1..={n}")));
    }
    let mut ids: Vec<usize> = (1..=n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for level in 0..k {
        let size = base + usize::from(level < extra);
        groups.push(ids[start..start + size].to_vec());
        start += size;
    }
    LevelAssignment::from_groups(n, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method5Result {
    pub assignment: LevelAssignment,
    pub placement: SubPeerPlacement,
    pub evaluation: LevelEvaluation,
}

impl Method5Result {
    pub fn wadt(&self) -> f64 {
        self.evaluation.wadt
    }
}

/// Upper-bound rates, placed level by level, collapsed to whole peers and
/// re-optimized per level.
pub fn method5_pipeline(inst: &NetworkInstance, order: PlacementOrder) -> Result<Method5Result> {
    let (ub, _) = upper_bound(inst)?;
    let placement = place_peers(inst, &RateAllocation(ub.rates), order)?;
    let assignment = placement.collapse(inst.len())?;
    let evaluation = evaluate_level_assignment(inst, &assignment)?;
    Ok(Method5Result {
        assignment,
        placement,
        evaluation,
    })
}
