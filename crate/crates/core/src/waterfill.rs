//! Clamped water-filling for box-constrained budget problems
//!
//! ```text
//! minimize    sum_i w_i / r_i
//! subject to  l_i <= r_i <= h_i
//!             sum_i (r_i - l_i) <= B
//! ```
//!
//! The KKT conditions give `r_i = clamp(sqrt(w_i) * R, l_i, h_i)` for a single
//! water level `R`. Every bound in this crate (upper bound, lower bound and
//! the two per-level local problems) is an instance of this problem with a
//! different choice of clamps and budget.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::model::{wadt, LevelAssignment, NetworkInstance, PeerSpec, RateAllocation, RATE_TOL};
use crate::Error;

const BISECTION_MAX_ITER: usize = 200;
const BISECTION_REL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampedBudgetProblem {
    pub weights: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub budget: f64,
}

impl ClampedBudgetProblem {
    pub fn new(weights: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>, budget: f64) -> Self {
        ClampedBudgetProblem {
            weights,
            lower,
            upper,
            budget,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(validation(
                "weights, lower and upper must have equal length",
            ));
        }
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(validation(format!(
                "budget must be finite and nonnegative, got {}",
                self.budget
            )));
        }
        for i in 0..n {
            let (w, l, h) = (self.weights[i], self.lower[i], self.upper[i]);
            if !(w.is_finite() && l.is_finite() && h.is_finite()) || w < 0.0 || l < 0.0 {
                return Err(validation(format!(
                    "entry {i}: need finite w >= 0, l >= 0 (w={w}, l={l}, h={h})"
                )));
            }
            if l > h + RATE_TOL {
                return Err(validation(format!(
                    "entry {i}: lower clamp {l} above upper {h}"
                )));
            }
        }
        Ok(())
    }

    /// `sum_i w_i / r_i` over positive weights.
    pub fn objective(&self, rates: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(rates)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &r)| if r > 0.0 { w / r } else { f64::INFINITY })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClampState {
    AtLower,
    Interior,
    AtUpper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfillSolution {
    pub rates: Vec<f64>,
    /// Common water level `R`; `inf` when every weighted entry sits at its
    /// upper clamp.
    #[serde(with = "crate::serde_f64")]
    pub level: f64,
    pub states: Vec<ClampState>,
    #[serde(with = "crate::serde_f64")]
    pub objective: f64,
    /// Budget left over when the clamps saturate before it binds.
    pub unused_budget: f64,
}

/// Solves a [`ClampedBudgetProblem`] exactly.
///
/// Zero-weight entries always sit at their lower clamp. `R` is located by
/// bisection on the nondecreasing map `R -> sum_i clamp(sqrt(w_i) R, l_i, h_i)`
/// and then snapped to the closed form implied by the interior set.
pub fn solve_clamped_waterfill(p: &ClampedBudgetProblem) -> Result<WaterfillSolution> {
    p.validate()?;
    let n = p.len();
    let sqrt_w: Vec<f64> = p.weights.iter().map(|w| w.sqrt()).collect();
    let weighted: Vec<usize> = (0..n).filter(|&i| p.weights[i] > 0.0).collect();
    // l may exceed h by at most RATE_TOL; treat those as pinned at l
    let upper: Vec<f64> = (0..n).map(|i| p.upper[i].max(p.lower[i])).collect();

    let room: f64 = weighted.iter().map(|&i| upper[i] - p.lower[i]).sum();
    if weighted.is_empty() || p.budget >= room {
        let mut rates = p.lower.clone();
        let mut states = vec![ClampState::AtLower; n];
        for &i in &weighted {
            rates[i] = upper[i];
            states[i] = ClampState::AtUpper;
        }
        let objective = p.objective(&rates);
        return Ok(WaterfillSolution {
            rates,
            level: f64::INFINITY,
            states,
            objective,
            unused_budget: p.budget - room.min(p.budget),
        });
    }

    if p.budget == 0.0 {
        let objective = p.objective(&p.lower);
        return Ok(WaterfillSolution {
            rates: p.lower.clone(),
            level: 0.0,
            states: vec![ClampState::AtLower; n],
            objective,
            unused_budget: 0.0,
        });
    }

    let filled = |level: f64| -> f64 {
        weighted
            .iter()
            .map(|&i| (sqrt_w[i] * level).clamp(p.lower[i], upper[i]) - p.lower[i])
            .sum()
    };

    let mut lo = 0.0_f64;
    let mut hi = weighted
        .iter()
        .map(|&i| upper[i] / sqrt_w[i])
        .fold(0.0, f64::max);
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < p.budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= BISECTION_REL_TOL * hi {
            break;
        }
    }
    let mut level = 0.5 * (lo + hi);

    // Snap R to the exact root: with the clamp pattern fixed, the budget
    // equation is linear in R over the interior entries.
    let classify_at = |level: f64| -> Vec<ClampState> {
        (0..n)
            .map(|i| {
                let x = sqrt_w[i] * level;
                if p.weights[i] == 0.0 || x <= p.lower[i] {
                    ClampState::AtLower
                } else if x >= upper[i] {
                    ClampState::AtUpper
                } else {
                    ClampState::Interior
                }
            })
            .collect()
    };
    let states = classify_at(level);
    let interior_sqrt_w: f64 = (0..n)
        .filter(|&i| states[i] == ClampState::Interior)
        .map(|i| sqrt_w[i])
        .sum();
    if interior_sqrt_w > 0.0 {
        let clamped_fill: f64 = weighted
            .iter()
            .filter(|&&i| states[i] != ClampState::Interior)
            .map(|&i| {
                if states[i] == ClampState::AtUpper {
                    upper[i] - p.lower[i]
                } else {
                    0.0
                }
            })
            .sum();
        let interior_lower: f64 = (0..n)
            .filter(|&i| states[i] == ClampState::Interior)
            .map(|i| p.lower[i])
            .sum();
        let exact = (p.budget - clamped_fill + interior_lower) / interior_sqrt_w;
        if exact.is_finite() && exact > 0.0 && classify_at(exact) == states {
            level = exact;
        }
    }

    let states = classify_at(level);
    let rates: Vec<f64> = (0..n)
        .map(|i| match states[i] {
            ClampState::AtLower => p.lower[i],
            ClampState::AtUpper => upper[i],
            ClampState::Interior => sqrt_w[i] * level,
        })
        .collect();
    let objective = p.objective(&rates);
    Ok(WaterfillSolution {
        rates,
        level,
        states,
        objective,
        unused_budget: 0.0,
    })
}

fn instance_problem(inst: &NetworkInstance, budget: f64) -> ClampedBudgetProblem {
    ClampedBudgetProblem::new(
        inst.peers.iter().map(|p| p.w).collect(),
        inst.peers.iter().map(|p| p.u).collect(),
        inst.peers.iter().map(|p| p.d).collect(),
        budget,
    )
}

/// Achievable upper bound: the server reserves `max u` to hand every peer its
/// own upload rate, and water-fills the remaining `S - max u` on top.
pub fn upper_bound(inst: &NetworkInstance) -> Result<(WaterfillSolution, f64)> {
    let max_u = inst.max_upload();
    if inst.server_bw <= max_u {
        return Err(Error::InfeasibleConstruction(format!(
            "server bandwidth {} does not exceed the largest upload {max_u}",
            inst.server_bw
        )));
    }
    let sol = solve_clamped_waterfill(&instance_problem(inst, inst.server_bw - max_u))?;
    let w = wadt(&sol.rates, inst);
    Ok((sol, w))
}

/// Relaxed lower bound: same clamps, full server budget `S`.
pub fn lower_bound(inst: &NetworkInstance) -> Result<(WaterfillSolution, f64)> {
    let sol = solve_clamped_waterfill(&instance_problem(inst, inst.server_bw))?;
    let w = wadt(&sol.rates, inst);
    Ok((sol, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelCase {
    /// Incoming bandwidth covers the level's uploads: `u <= r <= d`.
    Supplied,
    /// Starved level: `0 <= r <= u`, the whole inflow is passed on.
    Starved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSolution {
    pub rates: Vec<f64>,
    pub case: LevelCase,
    /// Virtual server bandwidth this level offers the next one.
    pub next_server_bw: f64,
    pub solution: WaterfillSolution,
}

/// Local problem of one level fed by a virtual server of bandwidth `s_prev`.
pub fn solve_level(level_peers: &[PeerSpec], s_prev: f64) -> Result<LevelSolution> {
    if !(s_prev.is_finite() && s_prev >= 0.0) {
        return Err(validation(format!(
            "virtual server bandwidth must be >= 0, got {s_prev}"
        )));
    }
    let weights: Vec<f64> = level_peers.iter().map(|p| p.w).collect();
    let uploads: Vec<f64> = level_peers.iter().map(|p| p.u).collect();
    let sum_u: f64 = uploads.iter().sum();
    if s_prev >= sum_u {
        let downloads = level_peers.iter().map(|p| p.d).collect();
        let sol = solve_clamped_waterfill(&ClampedBudgetProblem::new(
            weights,
            uploads,
            downloads,
            s_prev - sum_u,
        ))?;
        Ok(LevelSolution {
            rates: sol.rates.clone(),
            case: LevelCase::Supplied,
            next_server_bw: sum_u,
            solution: sol,
        })
    } else {
        let zeros = vec![0.0; level_peers.len()];
        let sol =
            solve_clamped_waterfill(&ClampedBudgetProblem::new(weights, zeros, uploads, s_prev))?;
        Ok(LevelSolution {
            rates: sol.rates.clone(),
            case: LevelCase::Starved,
            next_server_bw: sol.rates.iter().sum(),
            solution: sol,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEvaluation {
    pub rates: RateAllocation,
    #[serde(with = "crate::serde_f64")]
    pub wadt: f64,
    /// `S_0 = S, S_1, ..., S_K`.
    pub server_bw: Vec<f64>,
    /// Water level per level.
    #[serde(with = "crate::serde_f64::vec")]
    pub water_levels: Vec<f64>,
    pub cases: Vec<LevelCase>,
}

/// Chains [`solve_level`] from `S_0 = S` through the last level.
pub fn evaluate_level_assignment(
    inst: &NetworkInstance,
    la: &LevelAssignment,
) -> Result<LevelEvaluation> {
    if la.peer_count() != inst.len() {
        return Err(Error::Structural(format!(
            "assignment covers {} peers, instance has {}",
            la.peer_count(),
            inst.len()
        )));
    }
    let mut rates = vec![0.0; inst.len()];
    let mut server_bw = vec![inst.server_bw];
    let mut water_levels = Vec::with_capacity(la.max_level());
    let mut cases = Vec::with_capacity(la.max_level());
    let mut s = inst.server_bw;
    for group in la.groups() {
        let peers: Vec<PeerSpec> = group.iter().map(|&id| inst.peers[id - 1].clone()).collect();
        let sol = solve_level(&peers, s)?;
        for (&id, &r) in group.iter().zip(&sol.rates) {
            rates[id - 1] = r;
        }
        s = sol.next_server_bw;
        server_bw.push(s);
        water_levels.push(sol.solution.level);
        cases.push(sol.case);
    }
    let w = wadt(&rates, inst);
    Ok(LevelEvaluation {
        rates: RateAllocation(rates),
        wadt: w,
        server_bw,
        water_levels,
        cases,
    })
}
