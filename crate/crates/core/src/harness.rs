//! Seeded Monte-Carlo experiments comparing the seven allocation methods on
//! random instances, with summary statistics and report files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{solve_program, SolverOptions};
use crate::error::{validation, Error, Result};
use crate::model::{metrics, trivial_allocations, NetworkInstance, RateAllocation};
use crate::placement::{method5_pipeline, place_peers, random_placement, PlacementOrder};
use crate::waterfill::{evaluate_level_assignment, lower_bound, upper_bound};

/// Method 1 above this many program levels times peers is slow.
pub const METHOD1_SIZE_WARNING: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Method {
    /// Full level-decomposed convex program.
    Convex,
    /// Water-filling upper bound, a feasible hierarchical allocation.
    UpperBound,
    /// Water-filling lower bound.
    LowerBound,
    /// Random level placement, rates optimized level by level.
    RandomPlacement,
    /// Upper-bound rates placed by the peer-placement algorithm, collapsed
    /// to whole peers and re-optimized.
    PeerPlacement,
    /// `r_i = u_i`.
    UploadBaseline,
    /// `r_i = d_i`, infeasible in general.
    DownloadBaseline,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Convex,
        Method::UpperBound,
        Method::LowerBound,
        Method::RandomPlacement,
        Method::PeerPlacement,
        Method::UploadBaseline,
        Method::DownloadBaseline,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Convex => "convex",
            Method::UpperBound => "upper-bound",
            Method::LowerBound => "lower-bound",
            Method::RandomPlacement => "random-placement",
            Method::PeerPlacement => "peer-placement",
            Method::UploadBaseline => "upload-baseline",
            Method::DownloadBaseline => "download-baseline",
        }
    }
}

impl TryFrom<u8> for Method {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1..=7 => Ok(Method::ALL[n as usize - 1]),
            _ => Err(validation(format!("method number must be 1..7, got {n}"))),
        }
    }
}

impl From<Method> for u8 {
    fn from(m: Method) -> u8 {
        m.number()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<u8>() {
            return Method::try_from(n);
        }
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| validation(format!("unknown method {s:?}")))
    }
}

/// Parses a comma-separated method list such as `2,3,5`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut methods = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Method::from_str)
        .collect::<Result<Vec<_>>>()?;
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        return Err(validation("method list is empty"));
    }
    Ok(methods)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub peers: usize,
    pub server_bw: f64,
    /// Upload is drawn from `[alpha d, d]`.
    pub alpha: f64,
    /// Download is drawn from `[beta, 2 - beta]`.
    pub beta: f64,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Level count for Methods 1 and 4.
    pub levels: usize,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            peers: 100,
            server_bw: 10.0,
            alpha: 0.1,
            beta: 0.01,
            trials: 500,
            seed: 1,
            methods: Method::ALL.to_vec(),
            levels: 30,
            histogram_bins: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peers == 0 {
            return Err(validation("peer count must be positive"));
        }
        if !(self.server_bw.is_finite() && self.server_bw > 0.0) {
            return Err(validation(format!(
                "server bandwidth must be positive, got {}",
                self.server_bw
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(validation(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(validation(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if self.trials == 0 {
            return Err(validation("trial count must be positive"));
        }
        if self.methods.is_empty() {
            return Err(validation("method list is empty"));
        }
        if self.levels == 0 {
            return Err(validation("level count must be positive"));
        }
        if self.histogram_bins == 0 {
            return Err(validation("histogram bin count must be positive"));
        }
        Ok(())
    }
}

/// Generator for one trial: stream `trial` of the configured seed, so each
/// trial is independent of how many others run or in which order.
fn trial_rng(cfg: &ExperimentConfig, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    rng
}

fn draw_instance(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<NetworkInstance> {
    let n = cfg.peers;
    let d: Vec<f64> = (0..n)
        .map(|_| rng.random_range(cfg.beta..=2.0 - cfg.beta))
        .collect();
    let u: Vec<f64> = d
        .iter()
        .map(|&d| rng.random_range(cfg.alpha * d..=d))
        .collect();
    let w = vec![1.0 / n as f64; n];
    NetworkInstance::from_vectors(cfg.server_bw, &d, &u, &w)
}

/// Random instance of trial `trial`: `d ~ U[beta, 2 - beta]`,
/// `u ~ U[alpha d, d]`, `w = 1 / N`.
pub fn generate_instance(cfg: &ExperimentConfig, trial: usize) -> Result<NetworkInstance> {
    cfg.validate()?;
    draw_instance(cfg, &mut trial_rng(cfg, trial))
}

/// FNV-1a over the instance's bit patterns.
pub fn instance_digest(inst: &NetworkInstance) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(inst.server_bw.to_bits());
    for p in &inst.peers {
        eat(p.id as u64);
        eat(p.d.to_bits());
        eat(p.u.to_bits());
        eat(p.w.to_bits());
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    #[serde(with = "crate::serde_f64::option")]
    pub wadt: Option<f64>,
    pub bandwidth_usage: Option<f64>,
    /// Per-level virtual-server bandwidth `S_0, S_1, ...` where defined.
    pub virtual_server: Option<Vec<f64>>,
    pub error: Option<String>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub digest: String,
    pub outcomes: Vec<MethodOutcome>,
}

impl TrialResult {
    pub fn outcome(&self, m: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == m)
    }

    pub fn wadt(&self, m: Method) -> Option<f64> {
        self.outcome(m).and_then(|o| o.wadt)
    }
}

struct Evaluated {
    rates: Vec<f64>,
    virtual_server: Option<Vec<f64>>,
    warning: Option<String>,
}

fn evaluate(
    m: Method,
    inst: &NetworkInstance,
    cfg: &ExperimentConfig,
    placement_seed: u64,
) -> Result<Evaluated> {
    let plain = |rates: Vec<f64>| Evaluated {
        rates,
        virtual_server: None,
        warning: None,
    };
    Ok(match m {
        Method::Convex => {
            let sol = solve_program(inst, cfg.levels, &SolverOptions::default())?;
            Evaluated {
                rates: sol.peer_rates,
                virtual_server: Some(sol.virtual_server),
                warning: sol.warning,
            }
        }
        Method::UpperBound => {
            let rates = upper_bound(inst)?.0.rates;
            let placed = place_peers(
                inst,
                &RateAllocation(rates.clone()),
                PlacementOrder::DescRate,
            )?;
            Evaluated {
                rates,
                virtual_server: Some(placed.virtual_server()),
                warning: None,
            }
        }
        Method::LowerBound => plain(lower_bound(inst)?.0.rates),
        Method::RandomPlacement => {
            let la = random_placement(inst, cfg.levels, placement_seed)?;
            let ev = evaluate_level_assignment(inst, &la)?;
            Evaluated {
                rates: ev.rates.0,
                virtual_server: Some(ev.server_bw),
                warning: None,
            }
        }
        Method::PeerPlacement => {
            let res = method5_pipeline(inst, PlacementOrder::DescRate)?;
            Evaluated {
                rates: res.evaluation.rates.0,
                virtual_server: Some(res.evaluation.server_bw),
                warning: None,
            }
        }
        Method::UploadBaseline => plain(trivial_allocations(inst).0 .0),
        Method::DownloadBaseline => plain(trivial_allocations(inst).1 .0),
    })
}

/// Evaluates every configured method on trial `trial`'s instance.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let mut rng = trial_rng(cfg, trial);
    let inst = draw_instance(cfg, &mut rng)?;
    let placement_seed = rng.next_u64();
    let outcomes = cfg
        .methods
        .iter()
        .map(|&m| match evaluate(m, &inst, cfg, placement_seed) {
            Ok(ev) => {
                let met = metrics(&RateAllocation(ev.rates), &inst);
                MethodOutcome {
                    method: m,
                    wadt: Some(met.wadt),
                    bandwidth_usage: Some(met.bandwidth_usage),
                    virtual_server: ev.virtual_server,
                    error: None,
                    warning: ev.warning,
                }
            }
            Err(e) => MethodOutcome {
                method: m,
                wadt: None,
                bandwidth_usage: None,
                virtual_server: None,
                error: Some(e.to_string()),
                warning: None,
            },
        })
        .collect();
    Ok(TrialResult {
        trial,
        digest: instance_digest(&inst),
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub method: Method,
    /// `bins + 1` edges, equal width over the observed finite range.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub non_finite: u64,
}

impl Histogram {
    pub fn from_values(method: Method, values: &[f64], bins: usize) -> Histogram {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let non_finite = (values.len() - finite.len()) as u64;
        let mut counts = vec![0u64; bins];
        if finite.is_empty() {
            return Histogram {
                method,
                edges: Vec::new(),
                counts,
                non_finite,
            };
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|b| if b == bins { hi } else { lo + b as f64 * width })
            .collect();
        for v in finite {
            let bin = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Histogram {
            method,
            edges,
            counts,
            non_finite,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.non_finite
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Trials where the method produced a value.
    pub completed: usize,
    pub failed: usize,
    #[serde(with = "crate::serde_f64::option")]
    pub mean_wadt: Option<f64>,
    /// Mean over trials of this method's WADT divided by Method 3's.
    #[serde(with = "crate::serde_f64::option")]
    pub normalized_wadt: Option<f64>,
    /// Mean WADT divided by Method 3's mean WADT.
    #[serde(with = "crate::serde_f64::option")]
    pub ratio_of_means: Option<f64>,
    pub mean_bandwidth_usage: Option<f64>,
    /// Mean `S_j` per level; levels a trial does not have count as 0.
    pub mean_virtual_server: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub wadt: Vec<Histogram>,
    /// WADT minus Method 3's WADT.
    pub difference: Vec<Histogram>,
    /// `(WADT - WADT_3) / WADT_3`.
    pub relative_difference: Vec<Histogram>,
    pub bandwidth_usage: Vec<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodSummary>,
    pub histograms: Histograms,
    pub trials: Vec<TrialResult>,
    pub warnings: Vec<String>,
}

impl ExperimentSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn mean_wadt(&self, m: Method) -> Option<f64> {
        self.method(m).and_then(|s| s.mean_wadt)
    }

    pub fn mean_usage(&self, m: Method) -> Option<f64> {
        self.method(m).and_then(|s| s.mean_bandwidth_usage)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Aggregates trial results, folding in trial-index order.
pub fn summarize(cfg: &ExperimentConfig, mut trials: Vec<TrialResult>) -> ExperimentSummary {
    trials.sort_by_key(|t| t.trial);
    let bins = cfg.histogram_bins;
    let reference: Vec<Option<f64>> = trials.iter().map(|t| t.wadt(Method::LowerBound)).collect();
    let mean_reference = mean(&reference.iter().flatten().copied().collect::<Vec<_>>());

    let mut methods = Vec::new();
    let mut hist = Histograms {
        wadt: Vec::new(),
        difference: Vec::new(),
        relative_difference: Vec::new(),
        bandwidth_usage: Vec::new(),
    };
    for &m in &cfg.methods {
        let outcomes: Vec<Option<&MethodOutcome>> = trials.iter().map(|t| t.outcome(m)).collect();
        let wadts: Vec<f64> = outcomes.iter().flatten().filter_map(|o| o.wadt).collect();
        let usages: Vec<f64> = outcomes
            .iter()
            .flatten()
            .filter_map(|o| o.bandwidth_usage)
            .collect();
        let paired: Vec<(f64, f64)> = outcomes
            .iter()
            .zip(&reference)
            .filter_map(|(o, r)| Some((o.and_then(|o| o.wadt)?, (*r)?)))
            .collect();
        let diffs: Vec<f64> = paired.iter().map(|(w, r)| w - r).collect();
        let rels: Vec<f64> = paired.iter().map(|(w, r)| (w - r) / r).collect();
        let ratios: Vec<f64> = paired.iter().map(|(w, r)| w / r).collect();

        let profiles: Vec<&Vec<f64>> = outcomes
            .iter()
            .flatten()
            .filter(|o| o.wadt.is_some())
            .filter_map(|o| o.virtual_server.as_ref())
            .collect();
        let mean_virtual_server = if profiles.is_empty() {
            None
        } else {
            let depth = profiles.iter().map(|p| p.len()).max().unwrap_or(0);
            let count = profiles.len() as f64;
            Some(
                (0..depth)
                    .map(|j| {
                        profiles
                            .iter()
                            .map(|p| p.get(j).copied().unwrap_or(0.0))
                            .sum::<f64>()
                            / count
                    })
                    .collect(),
            )
        };
        let mean_wadt = mean(&wadts);
        methods.push(MethodSummary {
            method: m,
            completed: wadts.len(),
            failed: trials.len() - wadts.len(),
            mean_wadt,
            normalized_wadt: mean(&ratios),
            ratio_of_means: mean_wadt.zip(mean_reference).map(|(a, b)| a / b),
            mean_bandwidth_usage: mean(&usages),
            mean_virtual_server,
        });
        hist.wadt.push(Histogram::from_values(m, &wadts, bins));
        hist.bandwidth_usage
            .push(Histogram::from_values(m, &usages, bins));
        if !paired.is_empty() {
            hist.difference
                .push(Histogram::from_values(m, &diffs, bins));
            hist.relative_difference
                .push(Histogram::from_values(m, &rels, bins));
        }
    }

    let mut warnings = Vec::new();
    if cfg.methods.contains(&Method::Convex) && cfg.peers * cfg.levels > METHOD1_SIZE_WARNING {
        warnings.push(format!(
            "method 1 solves a program with {} peer levels per trial; expect long runtimes",
            cfg.peers * cfg.levels
        ));
    }
    for t in &trials {
        for o in &t.outcomes {
            if let Some(e) = &o.error {
                warnings.push(format!("trial {} method {}: {e}", t.trial, o.method));
            }
            if let Some(w) = &o.warning {
                warnings.push(format!("trial {} method {}: {w}", t.trial, o.method));
            }
        }
    }
    ExperimentSummary {
        config: cfg.clone(),
        methods,
        histograms: hist,
        trials,
        warnings,
    }
}

/// Runs every trial one after another.
pub fn run_experiment_sequential(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let trials = (0..cfg.trials)
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg, trials))
}

/// Runs trials in parallel; the result is identical to the sequential run.
#[cfg(feature = "parallel")]
pub fn run_experiment_parallel(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg, trials))
}

/// Runs the experiment, in parallel when the `parallel` feature is enabled.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    #[cfg(feature = "parallel")]
    {
        run_experiment_parallel(cfg)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_experiment_sequential(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(validation(format!(
                "report format must be csv or json, got {other:?}"
            ))),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_histograms(path: &Path, hists: &[Histogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "bin", "lower", "upper", "count"])?;
    for h in hists {
        for (b, c) in h.counts.iter().enumerate() {
            let (lo, hi) = if h.edges.is_empty() {
                (String::new(), String::new())
            } else {
                (h.edges[b].to_string(), h.edges[b + 1].to_string())
            };
            w.write_record([h.method.to_string(), b.to_string(), lo, hi, c.to_string()])?;
        }
        if h.non_finite > 0 {
            w.write_record([
                h.method.to_string(),
                "non-finite".to_string(),
                String::new(),
                String::new(),
                h.non_finite.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the report into `dir` and returns the files written.
///
/// CSV output is `summary.csv` (`method,wadt,nwadt,bu`), one histogram file
/// per quantity (`hist_wadt.csv`, `hist_diff.csv`, `hist_reldiff.csv`,
/// `hist_usage.csv`, columns `method,bin,lower,upper,count`) and
/// `virtual_server.csv` (`method,level,mean_bw`). JSON output is the whole
/// summary in `summary.json`.
pub fn emit_report(
    summary: &ExperimentSummary,
    dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Json => {
            let path = dir.join("summary.json");
            fs::write(&path, serde_json::to_string_pretty(summary)? + "\n")?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let mut written = Vec::new();
            let path = dir.join("summary.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["method", "wadt", "nwadt", "bu"])?;
            for s in &summary.methods {
                w.write_record([
                    s.method.to_string(),
                    cell(s.mean_wadt),
                    cell(s.normalized_wadt),
                    cell(s.mean_bandwidth_usage),
                ])?;
            }
            w.flush()?;
            written.push(path);

            let h = &summary.histograms;
            for (name, hists) in [
                ("hist_wadt.csv", &h.wadt),
                ("hist_diff.csv", &h.difference),
                ("hist_reldiff.csv", &h.relative_difference),
                ("hist_usage.csv", &h.bandwidth_usage),
            ] {
                let path = dir.join(name);
                write_histograms(&path, hists)?;
                written.push(path);
            }

            let path = dir.join("virtual_server.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["method", "level", "mean_bw"])?;
            for s in &summary.methods {
                for (j, bw) in s.mean_virtual_server.iter().flatten().enumerate() {
                    w.write_record([s.method.to_string(), j.to_string(), bw.to_string()])?;
                }
            }
            w.flush()?;
            written.push(path);
            Ok(written)
        }
    }
}
