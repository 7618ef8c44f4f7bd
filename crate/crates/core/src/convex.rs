//! Full level-decomposed program: choose per-level splits of every peer's
//! download and upload bandwidth and per-level rates to minimize WADT.
//!
//! Below the last level a sub-peer never needs more download than it
//! receives, so `d_{i,j} = r_{i,j}` for `j < K` and all unused bandwidth sits
//! at level `K`. What remains is a problem in the rates `r_{i,j}` and the
//! sub-level uploads `v_{i,j} = u_{i,j}` (`j < K`). It is solved with a
//! logarithmic barrier: Newton steps on each peer's dense block, coupled
//! through the `K` level-capacity rows by a Woodbury correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::model::{NetworkInstance, PeerSpec};

const TINY: f64 = 1e-12;
const OBJECTIVE_FLOOR: f64 = 1e-12;
const NEWTON_TOL: f64 = 1e-10;
const ARMIJO: f64 = 0.25;
const BOUNDARY_FRACTION: f64 = 0.99;
const MIN_STEP: f64 = 1e-16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Cap on the total number of Newton steps over all barrier stages.
    pub max_iter: usize,
    /// Stop once the duality measure `m / t` falls below this.
    pub tol: f64,
    /// Barrier parameter growth per stage.
    pub mu: f64,
    pub t0: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 5000,
            tol: 1e-9,
            mu: 10.0,
            t0: 1.0,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(validation("max_iter must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(validation(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(self.mu.is_finite() && self.mu > 1.0) {
            return Err(validation(format!("mu must exceed 1, got {}", self.mu)));
        }
        if !(self.t0.is_finite() && self.t0 > 0.0) {
            return Err(validation(format!("t0 must be positive, got {}", self.t0)));
        }
        Ok(())
    }
}

/// Values of every program variable, indexed `[peer][level]` in instance
/// peer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramPoint {
    pub rates: Vec<Vec<f64>>,
    pub download: Vec<Vec<f64>>,
    pub upload: Vec<Vec<f64>>,
}

impl ProgramPoint {
    pub fn peer_rates(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r.iter().sum()).collect()
    }

    /// Componentwise `(1 - theta) * self + theta * other`.
    pub fn lerp(&self, other: &ProgramPoint, theta: f64) -> ProgramPoint {
        let mix = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    x.iter()
                        .zip(y)
                        .map(|(p, q)| (1.0 - theta) * p + theta * q)
                        .collect()
                })
                .collect()
        };
        ProgramPoint {
            rates: mix(&self.rates, &other.rates),
            download: mix(&self.download, &other.download),
            upload: mix(&self.upload, &other.upload),
        }
    }
}

/// Largest violation per constraint family, all nonnegative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub download_split: f64,
    pub upload_split: f64,
    pub upload_within_download: f64,
    pub upload_within_rate: f64,
    pub rate_within_download: f64,
    pub nonnegativity: f64,
    pub level_capacity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [
            self.download_split,
            self.upload_split,
            self.upload_within_download,
            self.upload_within_rate,
            self.rate_within_download,
            self.nonnegativity,
            self.level_capacity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub t: f64,
    pub objective: f64,
    pub newton_steps: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSolution {
    pub levels: usize,
    #[serde(flatten)]
    pub point: ProgramPoint,
    pub peer_rates: Vec<f64>,
    #[serde(with = "crate::serde_f64")]
    pub objective: f64,
    /// `S_0 = S`, then `S_j = sum_i min(u_{i,j}, r_{i,j})` for `j = 1..K`.
    pub virtual_server: Vec<f64>,
    pub residuals: Residuals,
    pub max_violation: f64,
    pub log: Vec<StageLog>,
    pub newton_steps: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

/// The program for one instance and level count.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalProgram {
    pub server_bw: f64,
    pub levels: usize,
    pub peers: Vec<PeerSpec>,
}

impl HierarchicalProgram {
    pub fn new(inst: &NetworkInstance, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(validation("level count must be at least 1"));
        }
        Ok(HierarchicalProgram {
            server_bw: inst.server_bw,
            levels,
            peers: inst.peers.clone(),
        })
    }

    pub fn variable_count(&self) -> usize {
        3 * self.peers.len() * self.levels
    }

    /// WADT of a point; `+inf` when a weighted peer receives nothing.
    pub fn objective(&self, point: &ProgramPoint) -> f64 {
        self.peers
            .iter()
            .zip(point.peer_rates())
            .filter(|(p, _)| p.w > 0.0)
            .map(|(p, r)| if r > 0.0 { p.w / r } else { f64::INFINITY })
            .sum()
    }

    /// Per-level capacities `S_0 = S` and `S_j = sum_i u_{i,j}`.
    pub fn level_supply(&self, point: &ProgramPoint) -> Vec<f64> {
        let mut s = vec![self.server_bw];
        for j in 0..self.levels.saturating_sub(1) {
            s.push(point.upload.iter().map(|u| u[j]).sum());
        }
        s
    }

    pub fn residuals(&self, point: &ProgramPoint) -> Residuals {
        let k = self.levels;
        let mut res = Residuals::default();
        let bump = |slot: &mut f64, v: f64| *slot = slot.max(v);
        for (i, p) in self.peers.iter().enumerate() {
            let (r, d, u) = (&point.rates[i], &point.download[i], &point.upload[i]);
            bump(&mut res.download_split, (d.iter().sum::<f64>() - p.d).abs());
            bump(&mut res.upload_split, (u.iter().sum::<f64>() - p.u).abs());
            for j in 0..k {
                bump(&mut res.upload_within_download, u[j] - d[j]);
                bump(&mut res.rate_within_download, r[j] - d[j]);
                bump(&mut res.nonnegativity, -u[j]);
                bump(&mut res.nonnegativity, -r[j]);
                if j + 1 < k {
                    bump(&mut res.upload_within_rate, u[j] - r[j]);
                }
            }
        }
        let supply = self.level_supply(point);
        for j in 0..k {
            let demand: f64 = point.rates.iter().map(|r| r[j]).sum();
            bump(&mut res.level_capacity, demand - supply[j]);
        }
        res
    }

    /// Per-level virtual-server bandwidth of a point.
    pub fn virtual_server(&self, point: &ProgramPoint) -> Vec<f64> {
        std::iter::once(self.server_bw)
            .chain((0..self.levels).map(|j| {
                point
                    .upload
                    .iter()
                    .zip(&point.rates)
                    .map(|(u, r)| u[j].min(r[j]))
                    .sum()
            }))
            .collect()
    }

    /// A strictly feasible point, the one the barrier method starts from.
    pub fn interior_point(&self) -> Result<ProgramPoint> {
        let barrier = Barrier::build(self)?;
        Ok(barrier.to_point(&barrier.initial_x()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PeerKind {
    /// `0 < u < d`: free rates and sub-level uploads.
    Full,
    /// Nothing to upload to a later level.
    NoUpload,
    /// `u = d`: every sub-level sub-peer uploads exactly what it receives.
    Tight,
}

#[derive(Clone, Debug)]
struct Row {
    idx: Vec<usize>,
    coef: Vec<f64>,
    rhs: f64,
}

impl Row {
    fn dot(&self, x: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.coef)
            .map(|(&i, &c)| c * x[i])
            .sum()
    }
}

#[derive(Clone, Debug)]
struct Block {
    /// Position in the instance peer list.
    peer: usize,
    kind: PeerKind,
    w: f64,
    d: f64,
    u: f64,
    offset: usize,
    dim: usize,
    /// Local constraints over block-local indices.
    rows: Vec<Row>,
    /// First slack index of this block's rows.
    slack_offset: usize,
}

impl Block {
    /// Local index of the upload carried to level `j + 1`, if any.
    fn upload_var(&self, j: usize, k: usize) -> Option<usize> {
        if j + 1 >= k {
            return None;
        }
        match self.kind {
            PeerKind::Full => Some(k + j),
            PeerKind::Tight => Some(j),
            PeerKind::NoUpload => None,
        }
    }

    fn rate(&self, x: &[f64], k: usize) -> f64 {
        x[self.offset..self.offset + k].iter().sum()
    }
}

/// Barrier formulation over the reduced variables.
struct Barrier<'a> {
    prog: &'a HierarchicalProgram,
    /// Level count actually optimized; 1 when nobody can upload.
    k: usize,
    blocks: Vec<Block>,
    /// Global level rows `sum_i r_{i,j} - sum_i v_{i,j-1} <= S_{j-1}`.
    level_rows: Vec<Row>,
    level_slack_offset: usize,
    dim: usize,
    constraints: usize,
}

impl<'a> Barrier<'a> {
    fn build(prog: &'a HierarchicalProgram) -> Result<Self> {
        if prog.server_bw.is_nan() || prog.server_bw <= 0.0 {
            return Err(Error::Infeasible(format!(
                "server bandwidth {} leaves no strictly feasible point",
                prog.server_bw
            )));
        }
        if let Some(p) = prog.peers.iter().find(|p| p.d <= TINY && p.w > 0.0) {
            return Err(Error::Infeasible(format!(
                "peer {} has weight {} but no download bandwidth",
                p.id, p.w
            )));
        }
        let uploads = prog.levels >= 2 && prog.peers.iter().any(|p| p.d > TINY && p.u > TINY);
        let k = if uploads { prog.levels } else { 1 };

        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut slack_offset = 0;
        for (pos, p) in prog.peers.iter().enumerate().filter(|(_, p)| p.d > TINY) {
            let kind = if k == 1 || p.u <= TINY {
                PeerKind::NoUpload
            } else if p.d - p.u <= TINY {
                PeerKind::Tight
            } else {
                PeerKind::Full
            };
            let dim = if kind == PeerKind::Full { 2 * k - 1 } else { k };
            let rows = local_rows(kind, k, p.d, p.u);
            let n_rows = rows.len();
            blocks.push(Block {
                peer: pos,
                kind,
                w: p.w,
                d: p.d,
                u: p.u,
                offset,
                dim,
                rows,
                slack_offset,
            });
            offset += dim;
            slack_offset += n_rows;
        }

        let mut level_rows = Vec::with_capacity(k);
        for j in 0..k {
            let mut row = Row {
                idx: Vec::new(),
                coef: Vec::new(),
                rhs: if j == 0 { prog.server_bw } else { 0.0 },
            };
            for b in &blocks {
                row.idx.push(b.offset + j);
                row.coef.push(1.0);
                if j > 0 {
                    if let Some(v) = b.upload_var(j - 1, k) {
                        row.idx.push(b.offset + v);
                        row.coef.push(-1.0);
                    }
                }
            }
            level_rows.push(row);
        }
        Ok(Barrier {
            prog,
            k,
            blocks,
            level_rows,
            level_slack_offset: slack_offset,
            dim: offset,
            constraints: slack_offset + k,
        })
    }

    fn initial_x(&self) -> Vec<f64> {
        let k = self.k;
        let mut x = vec![0.0; self.dim];
        let total_upload: f64 = self
            .blocks
            .iter()
            .filter(|b| b.kind != PeerKind::NoUpload)
            .map(|b| b.u)
            .sum();
        let alpha = if total_upload > 0.0 {
            (self.prog.server_bw / total_upload).min(1.0)
        } else {
            0.0
        };
        // sub-level uploads shrink geometrically, halving each level
        let upload = |b: &Block, j: usize| alpha * b.u / 4.0 * 0.5f64.powi(j as i32);
        let mut capacity = vec![self.prog.server_bw; k];
        for (j, cap) in capacity.iter_mut().enumerate().skip(1) {
            *cap = self
                .blocks
                .iter()
                .filter(|b| b.upload_var(j - 1, k).is_some())
                .map(|b| upload(b, j - 1))
                .sum();
        }
        let margin = |b: &Block| match b.kind {
            PeerKind::Full => (b.d - b.u) / (2.0 * k as f64),
            PeerKind::NoUpload => b.d / (2.0 * k as f64),
            PeerKind::Tight => b.d / 4.0,
        };
        let spread: Vec<f64> = (0..k)
            .map(|j| {
                let total: f64 = self
                    .blocks
                    .iter()
                    .filter(|b| b.kind != PeerKind::Tight || j + 1 == k)
                    .map(margin)
                    .sum();
                if total > 0.0 {
                    (capacity[j] / (4.0 * total)).min(1.0)
                } else {
                    0.0
                }
            })
            .collect();
        for b in &self.blocks {
            for (j, c) in spread.iter().enumerate() {
                let v = if b.upload_var(j, k).is_some() {
                    upload(b, j)
                } else {
                    0.0
                };
                let extra = if b.kind != PeerKind::Tight || j + 1 == k {
                    margin(b) * c
                } else {
                    0.0
                };
                x[b.offset + j] = v + extra;
                if b.kind == PeerKind::Full && j + 1 < k {
                    x[b.offset + k + j] = v;
                }
            }
        }
        x
    }

    fn slacks(&self, x: &[f64]) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.constraints);
        for b in &self.blocks {
            let local = &x[b.offset..b.offset + b.dim];
            s.extend(b.rows.iter().map(|r| r.rhs - r.dot(local)));
        }
        s.extend(self.level_rows.iter().map(|r| r.rhs - r.dot(x)));
        s
    }

    /// Objective with the rate floor, as optimized.
    fn floored_objective(&self, x: &[f64]) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.w > 0.0)
            .map(|b| b.w / b.rate(x, self.k).max(OBJECTIVE_FLOOR))
            .sum()
    }

    /// Per-block gradient of `t f - sum log s`, without the level rows.
    fn block_gradient(&self, b: &Block, x: &[f64], slacks: &[f64], t: f64) -> DVector<f64> {
        let mut g = DVector::zeros(b.dim);
        if b.w > 0.0 {
            let r = b.rate(x, self.k).max(OBJECTIVE_FLOOR);
            for a in 0..self.k {
                g[a] -= t * b.w / (r * r);
            }
        }
        for (n, row) in b.rows.iter().enumerate() {
            let inv = 1.0 / slacks[b.slack_offset + n];
            for (&i, &ci) in row.idx.iter().zip(&row.coef) {
                g[i] += ci * inv;
            }
        }
        g
    }

    /// Solves `H_b X = rhs` for block `b`'s Hessian without the level rows.
    ///
    /// The Hessian is a block-diagonal part, whose inverse is written in
    /// squared slacks, plus at most three rank-one terms (the rate sum, which
    /// also carries the objective, the upload sum and the spare-bandwidth
    /// row). The rank-one terms go through a Woodbury correction, so no
    /// `1 / s^2` ever meets an O(1) term in a sum.
    fn solve_block(
        &self,
        b: &Block,
        x: &[f64],
        slacks: &[f64],
        t: f64,
        rhs: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let k = self.k;
        let s = &slacks[b.slack_offset..b.slack_offset + b.rows.len()];
        let sq = |i: usize| s[i] * s[i];
        let apply_dinv = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = m.clone();
            match b.kind {
                PeerKind::Full => {
                    for j in 0..k - 1 {
                        let (p, q) = (sq(1 + 2 * j), sq(2 + 2 * j));
                        for c in 0..m.ncols() {
                            let (xr, xv) = (m[(j, c)], m[(k + j, c)]);
                            out[(j, c)] = (p + q) * xr + q * xv;
                            out[(k + j, c)] = q * (xr + xv);
                        }
                    }
                    let p = sq(0);
                    for c in 0..m.ncols() {
                        out[(k - 1, c)] = p * m[(k - 1, c)];
                    }
                }
                PeerKind::NoUpload | PeerKind::Tight => {
                    for j in 0..k {
                        let p = sq(j);
                        for c in 0..m.ncols() {
                            out[(j, c)] = p * m[(j, c)];
                        }
                    }
                }
            }
            out
        };
        let h_obj = if b.w > 0.0 {
            let r = b.rate(x, k).max(OBJECTIVE_FLOOR);
            2.0 * t * b.w / (r * r * r)
        } else {
            0.0
        };
        let rate_sum_row = b.rows.len() - 1;
        let rate_sum_inv = sq(rate_sum_row) / (1.0 + h_obj * sq(rate_sum_row));
        let (u, c_inv) = match b.kind {
            PeerKind::Full => {
                let mut u = DMatrix::zeros(b.dim, 3);
                for j in 0..k {
                    u[(j, 0)] = 1.0;
                }
                for j in 0..k - 1 {
                    u[(k + j, 1)] = 1.0;
                    u[(j, 2)] = 1.0;
                    u[(k + j, 2)] = -1.0;
                }
                (u, vec![rate_sum_inv, sq(2 * k - 1), sq(2 * k)])
            }
            PeerKind::NoUpload | PeerKind::Tight => {
                (DMatrix::from_element(b.dim, 1, 1.0), vec![rate_sum_inv])
            }
        };
        let y = apply_dinv(rhs);
        let w = apply_dinv(&u);
        let cap = DMatrix::from_diagonal(&DVector::from_vec(c_inv)) + u.transpose() * &w;
        let corr = solve_spd(cap, &(u.transpose() * &y))
            .ok_or_else(|| Error::Resource("singular Newton block".into()))?;
        Ok(y - w * corr)
    }

    /// Dense Hessian of block `b` without the level rows.
    #[cfg(test)]
    fn block_hessian(&self, b: &Block, x: &[f64], slacks: &[f64], t: f64) -> DMatrix<f64> {
        let k = self.k;
        let mut h = DMatrix::zeros(b.dim, b.dim);
        if b.w > 0.0 {
            let r = b.rate(x, k).max(OBJECTIVE_FLOOR);
            h.view_mut((0, 0), (k, k)).fill(2.0 * t * b.w / (r * r * r));
        }
        for (n, row) in b.rows.iter().enumerate() {
            let s = slacks[b.slack_offset + n];
            for (&i, &ci) in row.idx.iter().zip(&row.coef) {
                for (&l, &cl) in row.idx.iter().zip(&row.coef) {
                    h[(i, l)] += ci * cl / (s * s);
                }
            }
        }
        h
    }

    /// Block `b`'s slice of the level rows, one column per level.
    fn block_level_matrix(&self, b: &Block) -> DMatrix<f64> {
        let k = self.k;
        let mut a = DMatrix::zeros(b.dim, k);
        for j in 0..k {
            a[(j, j)] = 1.0;
            if j > 0 {
                if let Some(v) = b.upload_var(j - 1, k) {
                    a[(v, j)] -= 1.0;
                }
            }
        }
        a
    }

    /// Newton direction and squared decrement.
    fn newton_direction(&self, x: &[f64], slacks: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let k = self.k;
        let sigma: Vec<f64> = (0..k)
            .map(|j| slacks[self.level_slack_offset + j])
            .collect();
        let mut m =
            DMatrix::<f64>::from_diagonal(&DVector::from_iterator(k, sigma.iter().map(|s| s * s)));
        let mut rhs_small = DVector::<f64>::zeros(k);
        let mut ys = Vec::with_capacity(self.blocks.len());
        let mut zs = Vec::with_capacity(self.blocks.len());
        let mut grads = Vec::with_capacity(self.blocks.len());
        let level_grad = DVector::from_iterator(k, sigma.iter().map(|s| 1.0 / s));
        for b in &self.blocks {
            let a = self.block_level_matrix(b);
            let g = self.block_gradient(b, x, slacks, t) + &a * &level_grad;
            let mut rhs = DMatrix::zeros(b.dim, k + 1);
            rhs.set_column(0, &(-&g));
            rhs.view_mut((0, 1), (b.dim, k)).copy_from(&a);
            let sol = self.solve_block(b, x, slacks, t, &rhs)?;
            let y = sol.column(0).into_owned();
            let z = sol.columns(1, k).into_owned();
            m += a.transpose() * &z;
            rhs_small += a.transpose() * &y;
            ys.push(y);
            zs.push(z);
            grads.push(g);
        }
        let corr = solve_spd(m, &DMatrix::from_column_slice(k, 1, rhs_small.as_slice()))
            .ok_or_else(|| Error::Resource("singular level system".into()))?
            .column(0)
            .into_owned();
        let mut dir = vec![0.0; self.dim];
        let mut lambda2 = 0.0;
        for (((b, y), z), g) in self.blocks.iter().zip(ys).zip(zs).zip(grads) {
            let d = y - z * &corr;
            lambda2 -= g.dot(&d);
            dir[b.offset..b.offset + b.dim].copy_from_slice(d.as_slice());
        }
        Ok((dir, lambda2))
    }

    /// Rate of change of every slack along `dir`.
    fn slack_rates(&self, dir: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.constraints);
        for b in &self.blocks {
            let local = &dir[b.offset..b.offset + b.dim];
            out.extend(b.rows.iter().map(|r| r.dot(local)));
        }
        out.extend(self.level_rows.iter().map(|r| r.dot(dir)));
        out
    }

    /// Change in `t f - sum log s` for a step, computed from the step itself
    /// so it stays accurate when `t f` is large.
    fn merit_change(
        &self,
        x: &[f64],
        dir: &[f64],
        slacks: &[f64],
        rates: &[f64],
        t: f64,
        step: f64,
    ) -> Option<f64> {
        let mut barrier = 0.0;
        for (s, a) in slacks.iter().zip(rates) {
            let ratio = step * a / s;
            if ratio >= 1.0 {
                return None;
            }
            barrier -= (-ratio).ln_1p();
        }
        let mut obj = 0.0;
        for b in self.blocks.iter().filter(|b| b.w > 0.0) {
            let r = b.rate(x, self.k).max(OBJECTIVE_FLOOR);
            let dr: f64 = dir[b.offset..b.offset + self.k].iter().sum::<f64>() * step;
            let r_new = (b.rate(x, self.k) + dr).max(OBJECTIVE_FLOOR);
            obj += b.w * (r - r_new) / (r * r_new);
        }
        Some(t * obj + barrier)
    }

    /// Maps reduced variables back to the full program, all spare bandwidth
    /// at the last level.
    fn to_point(&self, x: &[f64]) -> ProgramPoint {
        let big_k = self.prog.levels;
        let n = self.prog.peers.len();
        let mut rates = vec![vec![0.0; big_k]; n];
        let mut download = vec![vec![0.0; big_k]; n];
        let mut upload = vec![vec![0.0; big_k]; n];
        for b in &self.blocks {
            for j in 0..self.k {
                rates[b.peer][j] = x[b.offset + j];
            }
            for (j, slot) in upload[b.peer]
                .iter_mut()
                .enumerate()
                .take(self.k.saturating_sub(1))
            {
                *slot = b.upload_var(j, self.k).map_or(0.0, |v| x[b.offset + v]);
            }
        }
        for (i, p) in self.prog.peers.iter().enumerate() {
            let below = big_k - 1;
            for j in 0..below {
                download[i][j] = rates[i][j];
            }
            download[i][below] = p.d - download[i][..below].iter().sum::<f64>();
            upload[i][below] = p.u - upload[i][..below].iter().sum::<f64>();
        }
        ProgramPoint {
            rates,
            download,
            upload,
        }
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(ch) => Some(ch.solve(rhs)),
        None => m.lu().solve(rhs),
    }
}

fn local_rows(kind: PeerKind, k: usize, d: f64, u: f64) -> Vec<Row> {
    let single = |i: usize, c: f64, rhs: f64| Row {
        idx: vec![i],
        coef: vec![c],
        rhs,
    };
    let mut rows = Vec::new();
    let rates: Vec<usize> = (0..k).collect();
    match kind {
        PeerKind::NoUpload | PeerKind::Tight => {
            rows.extend(rates.iter().map(|&j| single(j, -1.0, 0.0)));
        }
        PeerKind::Full => {
            rows.push(single(k - 1, -1.0, 0.0));
            for j in 0..k - 1 {
                rows.push(Row {
                    idx: vec![j, k + j],
                    coef: vec![-1.0, 1.0],
                    rhs: 0.0,
                });
                rows.push(single(k + j, -1.0, 0.0));
            }
            rows.push(Row {
                idx: (k..2 * k - 1).collect(),
                coef: vec![1.0; k - 1],
                rhs: u,
            });
            let mut spare = Row {
                idx: (0..k - 1).collect(),
                coef: vec![1.0; k - 1],
                rhs: d - u,
            };
            spare.idx.extend(k..2 * k - 1);
            spare.coef.extend(std::iter::repeat_n(-1.0, k - 1));
            rows.push(spare);
        }
    }
    rows.push(Row {
        idx: rates,
        coef: vec![1.0; k],
        rhs: d,
    });
    rows
}

/// Minimizes WADT over the `levels`-level program with a log-barrier method.
pub fn solve_program(
    inst: &NetworkInstance,
    levels: usize,
    opts: &SolverOptions,
) -> Result<ProgramSolution> {
    opts.validate()?;
    let prog = HierarchicalProgram::new(inst, levels)?;
    let barrier = Barrier::build(&prog)?;
    let m = barrier.constraints as f64;

    let mut x = barrier.initial_x();
    let mut slacks = barrier.slacks(&x);
    if let Some(s) = slacks.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(Error::Infeasible(format!(
            "could not construct a strictly feasible start (slack {s})"
        )));
    }

    let mut t = opts.t0;
    let mut log = Vec::new();
    let mut steps = 0;
    let mut warning = None;
    let mut converged = false;
    let mut best = (barrier.floored_objective(&x), x.clone());

    'stages: loop {
        let mut stage_steps = 0;
        loop {
            if steps >= opts.max_iter {
                warning = Some(format!(
                    "Newton step limit {} reached at t = {t:e}, gap {:e}",
                    opts.max_iter,
                    m / t
                ));
                break 'stages;
            }
            let (dir, lambda2) = barrier.newton_direction(&x, &slacks, t)?;
            if !lambda2.is_finite() {
                warning = Some(format!("non-finite Newton decrement at t = {t:e}"));
                break 'stages;
            }
            if lambda2 / 2.0 <= NEWTON_TOL {
                break;
            }
            let rates = barrier.slack_rates(&dir);
            let mut step = slacks
                .iter()
                .zip(&rates)
                .filter(|(_, &a)| a > 0.0)
                .map(|(&s, &a)| BOUNDARY_FRACTION * s / a)
                .fold(1.0, f64::min);
            loop {
                match barrier.merit_change(&x, &dir, &slacks, &rates, t, step) {
                    Some(change) if change <= -ARMIJO * step * lambda2 => break,
                    _ => step *= 0.5,
                }
                if step < MIN_STEP {
                    warning = Some(format!(
                        "line search stalled at t = {t:e}, gap {:e}, decrement {lambda2:e}",
                        m / t
                    ));
                    break 'stages;
                }
            }
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += step * di;
            }
            for (s, a) in slacks.iter_mut().zip(&rates) {
                *s -= step * a;
            }
            steps += 1;
            stage_steps += 1;
            let f = barrier.floored_objective(&x);
            if f <= best.0 {
                best = (f, x.clone());
            }
        }
        let gap = m / t;
        log.push(StageLog {
            t,
            objective: barrier.floored_objective(&x),
            newton_steps: stage_steps,
            gap,
        });
        if gap < opts.tol {
            converged = true;
            break;
        }
        t *= opts.mu;
    }

    let chosen = if converged { x } else { best.1 };
    let point = barrier.to_point(&chosen);
    let residuals = prog.residuals(&point);
    Ok(ProgramSolution {
        levels,
        peer_rates: point.peer_rates(),
        objective: prog.objective(&point),
        virtual_server: prog.virtual_server(&point),
        max_violation: residuals.max(),
        residuals,
        point,
        log,
        newton_steps: steps,
        converged,
        warning,
    })
}

/// Cap on the free-variable count of [`brute_force_oracle`], counted as the
/// `3 N K` program variables minus the `2 N` split equalities.
pub const ORACLE_MAX_VARIABLES: usize = 8;
/// Cap on the estimated number of grid points the oracle may visit.
pub const ORACLE_MAX_POINTS: f64 = 1e10;

/// Exhaustive grid search over the program's feasible set. Every free
/// variable ranges over multiples of `grid_step` plus its range endpoints.
pub fn brute_force_oracle(inst: &NetworkInstance, levels: usize, grid_step: f64) -> Result<f64> {
    if levels == 0 {
        return Err(validation("level count must be at least 1"));
    }
    if !(grid_step.is_finite() && grid_step >= 1e-3) {
        return Err(validation(format!(
            "grid step must be at least 1e-3, got {grid_step}"
        )));
    }
    let n = inst.len();
    let vars = 3 * n * levels - 2 * n;
    if vars > ORACLE_MAX_VARIABLES {
        return Err(Error::Resource(format!(
            "oracle limited to {ORACLE_MAX_VARIABLES} free variables, instance has {vars}"
        )));
    }
    let estimate: f64 = inst
        .peers
        .iter()
        .map(|p| {
            let up = (p.u / grid_step + 2.0).powi(levels as i32 - 1);
            let down = (p.d / grid_step + 2.0).powi(levels as i32);
            up * down
        })
        .product();
    if estimate > ORACLE_MAX_POINTS {
        return Err(Error::Resource(format!(
            "oracle grid of about {estimate:e} points exceeds {ORACLE_MAX_POINTS:e}"
        )));
    }
    let mut search = Oracle {
        peers: &inst.peers,
        k: levels,
        step: grid_step,
        upload: vec![vec![0.0; levels]; n],
        used_download: vec![0.0; n],
        rate: vec![0.0; n],
        demand: vec![0.0; levels],
        supply: vec![0.0; levels],
        server: inst.server_bw,
        best: f64::INFINITY,
    };
    search.split_uploads(0, 0);
    if search.best.is_finite() {
        Ok(search.best)
    } else {
        Err(Error::Infeasible(
            "no feasible grid point gives every weighted peer a positive rate".into(),
        ))
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let count = if hi >= lo {
        ((hi - lo) / step).floor() as usize
    } else {
        0
    };
    let interior = (0..=count)
        .map(move |c| lo + c as f64 * step)
        .filter(move |v| *v < hi);
    interior.chain(std::iter::once(hi).filter(move |_| hi >= lo))
}

struct Oracle<'a> {
    peers: &'a [PeerSpec],
    k: usize,
    step: f64,
    upload: Vec<Vec<f64>>,
    used_download: Vec<f64>,
    rate: Vec<f64>,
    demand: Vec<f64>,
    supply: Vec<f64>,
    server: f64,
    best: f64,
}

impl Oracle<'_> {
    fn split_uploads(&mut self, i: usize, j: usize) {
        let n = self.peers.len();
        if i == n {
            self.supply[0] = self.server;
            for l in 1..self.k {
                self.supply[l] = self.upload.iter().map(|u| u[l - 1]).sum();
            }
            self.choose_rate(0, 0);
            return;
        }
        if j + 1 == self.k {
            let spent: f64 = self.upload[i][..j].iter().sum();
            self.upload[i][j] = (self.peers[i].u - spent).max(0.0);
            self.split_uploads(i + 1, 0);
            return;
        }
        let spent: f64 = self.upload[i][..j].iter().sum();
        let room = (self.peers[i].u - spent).max(0.0);
        for v in grid(0.0, room, self.step) {
            self.upload[i][j] = v;
            self.split_uploads(i, j + 1);
        }
    }

    fn choose_rate(&mut self, j: usize, i: usize) {
        let n = self.peers.len();
        if j == self.k {
            let total: f64 = self
                .peers
                .iter()
                .zip(&self.rate)
                .filter(|(p, _)| p.w > 0.0)
                .map(|(p, &r)| if r > 0.0 { p.w / r } else { f64::INFINITY })
                .sum();
            self.best = self.best.min(total);
            return;
        }
        if i == n {
            self.choose_rate(j + 1, 0);
            return;
        }
        let p = &self.peers[i];
        let last = j + 1 == self.k;
        let lo = if last { 0.0 } else { self.upload[i][j] };
        let download_room = p.d - self.used_download[i];
        let hi = download_room.min(self.supply[j] - self.demand[j]);
        // the last level also needs download for its own upload share
        if hi < lo || (last && self.upload[i][j] > download_room) {
            return;
        }
        let saved = (self.used_download[i], self.rate[i], self.demand[j]);
        for r in grid(lo, hi, self.step) {
            self.used_download[i] = saved.0 + if last { r.max(self.upload[i][j]) } else { r };
            self.rate[i] = saved.1 + r;
            self.demand[j] = saved.2 + r;
            self.choose_rate(j, i + 1);
        }
        (self.used_download[i], self.rate[i], self.demand[j]) = saved;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waterfill::{lower_bound, upper_bound};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, server: Option<f64>) -> NetworkInstance {
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.99)).collect();
        let u: Vec<f64> = d.iter().map(|&d| rng.random_range(0.1 * d..=d)).collect();
        let w = vec![1.0 / n as f64; n];
        let s = server.unwrap_or_else(|| 2.0 * u.iter().cloned().fold(0.0, f64::max) + 5.0);
        NetworkInstance::from_vectors(s, &d, &u, &w).unwrap()
    }

    fn single(s: f64, d: f64, u: f64) -> NetworkInstance {
        NetworkInstance::from_vectors(s, &[d], &[u], &[1.0]).unwrap()
    }

    fn starved(d: f64, u: f64) -> NetworkInstance {
        let mut inst = single(1.0, d, u);
        inst.server_bw = 0.0;
        inst
    }

    #[test]
    fn single_peer_download_clamped() {
        let sol = solve_program(&single(10.0, 2.0, 0.5), 1, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "{:?}", sol.warning);
        assert!((sol.point.rates[0][0] - 2.0).abs() < 1e-6);
        assert!((sol.objective - 0.5).abs() < 1e-6);
        assert!(sol.max_violation <= 1e-8);
    }

    #[test]
    fn oracle_single_peer() {
        assert!(
            (brute_force_oracle(&single(10.0, 2.0, 0.5), 1, 0.01).unwrap() - 0.5).abs() < 1e-12
        );
    }

    #[test]
    fn oracle_reports_infeasible_grid() {
        let err = brute_force_oracle(&starved(2.0, 0.5), 2, 0.1).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(matches!(
            solve_program(&starved(2.0, 0.5), 2, &SolverOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn oracle_refuses_large_programs() {
        let inst = NetworkInstance::from_vectors(1.0, &[1.0; 3], &[0.5; 3], &[1.0; 3]).unwrap();
        assert!(matches!(
            brute_force_oracle(&inst, 2, 0.1),
            Err(Error::Resource(_))
        ));
        assert!(matches!(
            brute_force_oracle(&inst, 1, 1e-4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn oracle_symmetric_pair_splits_server() {
        let inst =
            NetworkInstance::from_vectors(1.0, &[1.0, 1.0], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let step = 0.01;
        let best = brute_force_oracle(&inst, 1, step).unwrap();
        // optimum gives each peer 0.5
        assert!((best - 2.0).abs() < 1e-9);
        let shifted = 0.5 / (0.5 + step) + 0.5 / (0.5 - step);
        assert!(best <= shifted);
    }

    #[test]
    fn solver_matches_oracle_on_small_programs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let s = rng.random_range(0.3..2.0);
            let inst = random_instance(&mut rng, 2, Some(s));
            let oracle = brute_force_oracle(&inst, 2, 0.05).unwrap();
            let sol = solve_program(&inst, 2, &SolverOptions::default()).unwrap();
            assert!(
                sol.objective <= oracle + 1e-6,
                "{} vs {}",
                sol.objective,
                oracle
            );
            assert!(
                sol.objective >= oracle - 2e-2,
                "{} vs {}",
                sol.objective,
                oracle
            );
        }
    }

    #[test]
    fn sandwiched_by_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 20, None);
            let sol = solve_program(&inst, 5, &SolverOptions::default()).unwrap();
            let lb = lower_bound(&inst).unwrap().1;
            let ub = upper_bound(&inst).unwrap().1;
            assert!(sol.converged, "{:?}", sol.warning);
            assert!(sol.max_violation <= 1e-8, "{:?}", sol.residuals);
            assert!(
                lb <= sol.objective + 1e-6 && sol.objective <= ub + 1e-6,
                "{lb} {} {ub}",
                sol.objective
            );
        }
    }

    #[test]
    fn stage_objectives_do_not_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = random_instance(&mut rng, 10, Some(3.0));
        let sol = solve_program(&inst, 4, &SolverOptions::default()).unwrap();
        assert!(sol.log.len() > 5);
        for pair in sol.log.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-10, "{pair:?}");
        }
    }

    #[test]
    fn midpoint_is_feasible_and_no_worse_than_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = random_instance(&mut rng, 6, Some(2.0));
        let prog = HierarchicalProgram::new(&inst, 3).unwrap();
        let a = prog.interior_point().unwrap();
        let b = solve_program(&inst, 3, &SolverOptions::default())
            .unwrap()
            .point;
        for theta in [0.25, 0.5, 0.75] {
            let mid = a.lerp(&b, theta);
            assert!(prog.residuals(&mid).max() <= 1e-9);
            let bound = (1.0 - theta) * prog.objective(&a) + theta * prog.objective(&b);
            assert!(prog.objective(&mid) <= bound + 1e-9);
        }
    }

    #[test]
    fn interior_point_is_strictly_feasible_for_every_peer_kind() {
        // full, tight, upload-free and download-free peers together
        let peers = vec![
            PeerSpec::new(1, 1.5, 0.7, 0.25),
            PeerSpec::new(2, 1.0, 1.0, 0.25),
            PeerSpec::new(3, 0.8, 0.0, 0.25),
            PeerSpec::new(4, 0.0, 0.0, 0.0),
            PeerSpec::new(5, 1.2, 0.3, 0.25),
        ];
        let inst = NetworkInstance::new(0.4, peers).unwrap();
        for k in 1..=4 {
            let prog = HierarchicalProgram::new(&inst, k).unwrap();
            let barrier = Barrier::build(&prog).unwrap();
            let x = barrier.initial_x();
            assert!(barrier.slacks(&x).iter().all(|&s| s > 0.0), "K = {k}");
            let sol = solve_program(&inst, k, &SolverOptions::default()).unwrap();
            assert!(sol.max_violation <= 1e-8, "K = {k}: {:?}", sol.residuals);
            assert!(sol.objective.is_finite());
        }
    }

    #[test]
    fn no_uploaders_collapses_to_one_level() {
        let inst =
            NetworkInstance::from_vectors(1.0, &[1.0, 1.0], &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        let sol = solve_program(&inst, 3, &SolverOptions::default()).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-6);
        assert!(sol.point.rates.iter().all(|r| r[1] == 0.0 && r[2] == 0.0));
    }

    #[test]
    fn starving_weighted_peer_is_infeasible() {
        let inst =
            NetworkInstance::from_vectors(1.0, &[1.0, 0.0], &[0.5, 0.0], &[0.5, 0.5]).unwrap();
        assert!(matches!(
            solve_program(&inst, 2, &SolverOptions::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn iteration_cap_returns_best_point_with_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_instance(&mut rng, 5, Some(2.0));
        let opts = SolverOptions {
            max_iter: 3,
            ..SolverOptions::default()
        };
        let sol = solve_program(&inst, 3, &opts).unwrap();
        assert!(!sol.converged);
        assert!(sol.warning.is_some());
        assert!(sol.objective.is_finite());
        assert!(sol.max_violation <= 1e-8);
    }

    #[test]
    fn structured_newton_step_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut inst = random_instance(&mut rng, 4, Some(1.5));
        inst.peers[1].u = inst.peers[1].d;
        inst.peers[2].u = 0.0;
        let prog = HierarchicalProgram::new(&inst, 3).unwrap();
        let barrier = Barrier::build(&prog).unwrap();
        let x = barrier.initial_x();
        let slacks = barrier.slacks(&x);
        let t = 7.0;
        let (dir, lambda2) = barrier.newton_direction(&x, &slacks, t).unwrap();

        let n = barrier.dim;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for b in &barrier.blocks {
            let hb = barrier.block_hessian(b, &x, &slacks, t);
            let gb = barrier.block_gradient(b, &x, &slacks, t);
            h.view_mut((b.offset, b.offset), (b.dim, b.dim))
                .copy_from(&hb);
            g.rows_mut(b.offset, b.dim).copy_from(&gb);
        }
        for (j, row) in barrier.level_rows.iter().enumerate() {
            let s = slacks[barrier.level_slack_offset + j];
            for (&a, &ca) in row.idx.iter().zip(&row.coef) {
                g[a] += ca / s;
                for (&c, &cc) in row.idx.iter().zip(&row.coef) {
                    h[(a, c)] += ca * cc / (s * s);
                }
            }
        }
        let dense = h.lu().solve(&(-&g)).unwrap();
        for (a, b) in dir.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert!((lambda2 + g.dot(&dense)).abs() <= 1e-8 * lambda2.abs().max(1.0));
    }

    #[test]
    fn solution_json_round_trip() {
        let sol = solve_program(&single(10.0, 2.0, 0.5), 2, &SolverOptions::default()).unwrap();
        let text = serde_json::to_string(&sol).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["rates"].is_array());
        assert_eq!(v["virtual_server"].as_array().unwrap().len(), 3);
        let back: ProgramSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
    }
}
