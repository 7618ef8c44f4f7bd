//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line; the
//! binary exits nonzero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use p2p_wadt::convex::{solve_program, SolverOptions};
use p2p_wadt::decompose::{decompose, verify_equivalence, DecomposeOptions};
use p2p_wadt::harness::{generate_instance, run_experiment, ExperimentConfig, Method};
use p2p_wadt::model::{
    classify, compute_levels, validate_flow_graph, FlowGraph, NetworkInstance, PeerSpec,
    RateAllocation, TaxonomyClass,
};
use p2p_wadt::placement::{place_peers, PartKind, PlacementOrder};
use p2p_wadt::waterfill::{
    lower_bound, solve_clamped_waterfill, solve_level, upper_bound, ClampState,
    ClampedBudgetProblem, LevelCase, WaterfillSolution,
};
use petgraph::algo::is_cyclic_directed;
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within_rel(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target.abs()
}

// ---------------------------------------------------------------- criterion 1

const GRID_STEP: f64 = 0.01;

fn grid(lo: f64, hi: f64) -> Vec<f64> {
    let mut pts = vec![lo];
    let mut k = (lo / GRID_STEP).floor() as i64 + 1;
    loop {
        let x = k as f64 * GRID_STEP;
        if x >= hi {
            break;
        }
        if x > lo {
            pts.push(x);
        }
        k += 1;
    }
    if hi > lo {
        pts.push(hi);
    }
    pts
}

fn grid_search(p: &ClampedBudgetProblem) -> f64 {
    let grids: Vec<Vec<f64>> = (0..p.len())
        .map(|i| {
            if p.weights[i] == 0.0 {
                vec![p.lower[i]]
            } else {
                grid(p.lower[i], p.upper[i])
            }
        })
        .collect();
    let mut best = f64::INFINITY;
    search(p, &grids, 0, p.budget, 0.0, &mut best);
    best
}

fn search(
    p: &ClampedBudgetProblem,
    grids: &[Vec<f64>],
    i: usize,
    left: f64,
    acc: f64,
    best: &mut f64,
) {
    let term = |x: f64| {
        if p.weights[i] == 0.0 {
            0.0
        } else if x > 0.0 {
            p.weights[i] / x
        } else {
            f64::INFINITY
        }
    };
    if i + 1 == p.len() {
        if let Some(&x) = grids[i]
            .iter()
            .rev()
            .find(|&&x| x - p.lower[i] <= left + 1e-12)
        {
            *best = best.min(acc + term(x));
        }
        return;
    }
    for &x in &grids[i] {
        let rest = left - (x - p.lower[i]);
        if rest < -1e-12 {
            break;
        }
        let value = acc + term(x);
        if value >= *best {
            continue;
        }
        search(p, grids, i + 1, rest, value, best);
    }
}

fn random_problem(rng: &mut ChaCha8Rng, max_n: usize, zero_weights: bool) -> ClampedBudgetProblem {
    let n = rng.random_range(1..=max_n);
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            if zero_weights && rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let upper: Vec<f64> = lower
        .iter()
        .map(|l| l + rng.random_range(0.0..1.0))
        .collect();
    let room: f64 = upper.iter().zip(&lower).map(|(h, l)| h - l).sum();
    let budget = rng.random_range(0.0..1.0) * (room + 0.5);
    ClampedBudgetProblem::new(weights, lower, upper, budget)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let problems: Vec<_> = (0..200)
        .map(|_| random_problem(&mut rng, 4, true))
        .collect();
    let start = Instant::now();
    let solutions: Vec<_> = problems
        .iter()
        .map(|p| solve_clamped_waterfill(p).expect("valid problem"))
        .collect();
    let elapsed = start.elapsed();
    let mut worst = f64::NEG_INFINITY;
    let mut total_gap = 0.0;
    let mut bad = 0;
    for (p, s) in problems.iter().zip(&solutions) {
        let oracle = grid_search(p);
        let gap = s.objective - oracle;
        worst = worst.max(gap);
        total_gap += gap;
        if gap > 1e-6 {
            bad += 1;
        }
    }
    let whole = start.elapsed();
    Outcome::new(
        bad == 0 && whole < Duration::from_secs(5),
        format!(
            "{bad}/200 above grid minimum + 1e-6, worst waterfill - grid = {worst:.3e}, \
             mean {:.3e}, waterfill {:.1} ms, with oracle {:.2} s",
            total_gap / 200.0,
            elapsed.as_secs_f64() * 1e3,
            whole.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let cfg = ExperimentConfig {
        peers: 20,
        seed: 2,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut nonconverged = 0;
    let (mut low_gap, mut high_gap) = (f64::INFINITY, f64::INFINITY);
    for trial in 0..100 {
        let drawn = generate_instance(&cfg, trial).expect("instance");
        let s = 2.0 * drawn.max_upload() + 5.0;
        let inst = NetworkInstance::new(s, drawn.peers.clone()).expect("instance");
        let lb = lower_bound(&inst).expect("lower bound").1;
        let ub = upper_bound(&inst).expect("upper bound").1;
        let sol = solve_program(&inst, 5, &SolverOptions::default()).expect("convex solve");
        if !sol.converged {
            nonconverged += 1;
        }
        low_gap = low_gap.min(sol.objective + 1e-6 - lb);
        high_gap = high_gap.min(ub + 2e-6 - (sol.objective + 1e-6));
        if !(lb <= sol.objective + 1e-6 && sol.objective + 1e-6 <= ub + 2e-6)
            || sol.max_violation > 1e-8
        {
            bad.push(trial);
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        bad.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} of 100 outside [LB, UB], min LB slack {low_gap:.2e}, min UB slack {high_gap:.2e}, \
             {nonconverged} not converged, {:.1} s",
            bad.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let cfg = ExperimentConfig {
        methods: Method::ALL[1..].to_vec(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let summary = run_experiment(&cfg).expect("experiment");
    let elapsed = start.elapsed();
    let wadt = |m| summary.mean_wadt(m).unwrap_or(f64::NAN);
    let usage = |m| summary.mean_usage(m).unwrap_or(f64::NAN);
    let rows = [
        ("M3 wadt", wadt(Method::LowerBound), 2.877, 0.05),
        ("M2 wadt", wadt(Method::UpperBound), 2.947, 0.05),
        ("M7 wadt", wadt(Method::DownloadBaseline), 2.468, 0.05),
        ("M6 wadt", wadt(Method::UploadBaseline), 6.361, 0.05),
        ("M3 usage", usage(Method::LowerBound), 0.650, 0.05),
        ("M5 wadt", wadt(Method::PeerPlacement), 3.461, 0.15),
        ("M4 wadt", wadt(Method::RandomPlacement), 5.338, 0.20),
    ];
    let mut pass = elapsed < Duration::from_secs(300);
    let mut parts = Vec::new();
    for (name, value, target, tol) in rows {
        let ok = within_rel(value, target, tol);
        pass &= ok;
        parts.push(format!(
            "{name} {value:.3} vs {target} ±{}% {}",
            tol * 100.0,
            if ok { "ok" } else { "out" }
        ));
    }
    let m7_usage = usage(Method::DownloadBaseline);
    let ok = m7_usage == 1.0;
    pass &= ok;
    parts.push(format!(
        "M7 usage {m7_usage} vs 1 exactly {}",
        if ok { "ok" } else { "out" }
    ));
    Outcome::new(
        pass,
        format!("{}; {:.1} s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig {
        trials: 20,
        methods: vec![Method::Convex, Method::LowerBound],
        levels: 30,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let summary = run_experiment(&cfg).expect("experiment");
    let m1 = summary.method(Method::Convex).expect("method 1");
    let lb = summary.mean_wadt(Method::LowerBound).unwrap_or(f64::NAN);
    let mean = m1.mean_wadt.unwrap_or(f64::NAN);
    let pass = m1.completed == 20 && mean >= lb - 1e-3 && mean <= lb * 1.03;
    Outcome::new(
        pass,
        format!(
            "mean M1 {mean:.6} vs mean LB {lb:.6} (window [{:.6}, {:.6}]), {} of 20 completed, {:.1} s",
            lb - 1e-3,
            lb * 1.03,
            m1.completed,
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let cfg = ExperimentConfig {
        peers: 4000,
        server_bw: 50.0,
        trials: 100,
        methods: vec![Method::UpperBound, Method::LowerBound],
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let summary = run_experiment(&cfg).expect("experiment");
    let elapsed = start.elapsed();
    let m2 = summary.mean_wadt(Method::UpperBound).unwrap_or(f64::NAN);
    let m3 = summary.mean_wadt(Method::LowerBound).unwrap_or(f64::NAN);
    let diffs: Vec<f64> = summary
        .trials
        .iter()
        .filter_map(|t| Some((t.wadt(Method::UpperBound)? - t.wadt(Method::LowerBound)?).abs()))
        .collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    let pass = diffs.len() == 100
        && within_rel(m3, 3.854, 0.05)
        && within_rel(m2, 3.870, 0.05)
        && mean_diff < 0.02 * m3
        && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "M3 {m3:.4} vs 3.854, M2 {m2:.4} vs 3.870, mean |M2 - M3| {mean_diff:.4} ({:.3}% of M3), {:.1} s",
            100.0 * mean_diff / m3,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

/// Random acyclic flow graph that respects every bandwidth limit and lets no
/// peer forward more than it receives.
fn random_flow_dag(rng: &mut ChaCha8Rng) -> (FlowGraph, NetworkInstance) {
    let n = rng.random_range(1..=10);
    let mut order: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut g = FlowGraph::new(n);
    let mut inflow = vec![0.0f64; n + 1];
    let mut outflow = vec![0.0f64; n + 1];
    let mut upload = vec![0.0f64; n + 1];
    let mut download = vec![0.0; n + 1];
    for (pos, &v) in order.iter().enumerate() {
        let mut sources: Vec<usize> = vec![0];
        sources.extend(
            order[..pos]
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5)),
        );
        if pos > 0 && !rng.random_bool(0.3) {
            sources.retain(|&s| s != 0);
        }
        for &s in &sources {
            let spare = if s == 0 {
                f64::INFINITY
            } else {
                upload[s].min(inflow[s]) - outflow[s]
            };
            let rate = rng.random_range(0.01..1.0f64).min(spare);
            if rate > 1e-6 {
                g.add_edge(s, v, rate).expect("edge");
                outflow[s] += rate;
                inflow[v] += rate;
            }
        }
        if inflow[v] == 0.0 {
            let rate = rng.random_range(0.01..1.0);
            g.add_edge(0, v, rate).expect("edge");
            outflow[0] += rate;
            inflow[v] += rate;
        }
        download[v] = inflow[v] * rng.random_range(1.0..1.5);
        upload[v] = download[v] * rng.random_range(0.1..1.0);
    }
    let peers = (1..=n)
        .map(|id| PeerSpec::new(id, download[id], upload[id], 1.0 / n as f64))
        .collect();
    let inst =
        NetworkInstance::new(outflow[0] + rng.random_range(0.0..1.0), peers).expect("instance");
    (g, inst)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut failures = Vec::new();
    let mut max_levels = 0;
    for case in 0..100 {
        let (g, inst) = random_flow_dag(&mut rng);
        assert!(validate_flow_graph(&g, &inst).expect("validate").is_empty());
        let k = compute_levels(&g).expect("levels").max_level();
        let n = inst.len();
        let result = decompose(&g, &inst, DecomposeOptions::default()).and_then(|sp| {
            let class = classify(&sp.to_flow_graph()?.0);
            Ok((verify_equivalence(&g, &sp), class, sp))
        });
        match result {
            Ok((equivalent, class, sp)) => {
                max_levels = max_levels.max(sp.level_count());
                let per_level_ok = sp.levels.iter().all(|l| l.len() <= n);
                if !equivalent
                    || class != TaxonomyClass::StrictlyHierarchical
                    || sp.level_count() > k
                    || !per_level_ok
                {
                    failures.push(format!(
                        "case {case}: equivalent={equivalent} class={class} levels={}/{k}",
                        sp.level_count()
                    ));
                }
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{} of 100 graphs failed, deepest decomposition {max_levels} levels{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!(", first: {f}"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Random static P2P graph: a random spanning tree from the server plus
/// extra peer-to-peer edges that may close cycles.
fn random_static_graph(rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n: usize = rng.random_range(1..=12);
    let mut order: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for (pos, &v) in order.iter().enumerate() {
        let pick = rng.random_range(0..=pos);
        let parent = if pick == 0 { 0 } else { order[pick - 1] };
        edges.push((parent, v));
    }
    let extra_p = rng.random_range(0.0..0.25);
    for a in 0..=n {
        for b in 1..=n {
            if a != b && rng.random_bool(extra_p) {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut cyclic, mut acyclic, mut mismatches) = (0, 0, Vec::new());
    for case in 0..500 {
        let edges = random_static_graph(&mut rng);
        let n = edges.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0);
        let mut g = FlowGraph::new(n);
        let mut pg: DiGraph<(), ()> = DiGraph::new();
        let nodes: Vec<_> = (0..=n).map(|_| pg.add_node(())).collect();
        for &(a, b) in &edges {
            g.add_edge(a, b, rng.random_range(0.01..1.0)).expect("edge");
            pg.add_edge(nodes[a], nodes[b], ());
        }
        let has_cycle = is_cyclic_directed(&pg);
        if has_cycle {
            cyclic += 1;
        } else {
            acyclic += 1;
        }
        let class = classify(&g);
        if class.is_hierarchical() == has_cycle || class == TaxonomyClass::NotStaticP2P {
            mismatches.push(format!("case {case}: {class}, cyclic={has_cycle}"));
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        format!(
            "{} mismatches over 500 graphs ({cyclic} cyclic, {acyclic} acyclic){}",
            mismatches.len(),
            mismatches
                .first()
                .map(|m| format!(", first: {m}"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> NetworkInstance {
    let n = rng.random_range(1..=max_n);
    let peers: Vec<PeerSpec> = (1..=n)
        .map(|id| {
            let d = rng.random_range(0.01..1.99);
            let u = d * rng.random_range(0.1..1.0);
            let w = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            };
            PeerSpec::new(id, d, u, w)
        })
        .collect();
    let max_u = peers.iter().map(|p| p.u).fold(0.0, f64::max);
    let s = max_u + rng.random_range(0.01..1.0) * (1.0 + n as f64 / 10.0);
    NetworkInstance::new(s, peers).expect("instance")
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let orders = [
        PlacementOrder::DescRate,
        PlacementOrder::AscRate,
        PlacementOrder::Id,
        PlacementOrder::SeededRandom(88),
    ];
    let mut failures = Vec::new();
    let (mut max_splits, mut max_levels) = (0, 0);
    for case in 0..100 {
        let inst = random_instance(&mut rng, 80);
        let rates = RateAllocation(upper_bound(&inst).expect("upper bound").0.rates);
        for order in orders {
            match place_peers(&inst, &rates, order) {
                Ok(p) => {
                    max_splits = max_splits.max(p.splits);
                    max_levels = max_levels.max(p.level_count());
                    let per_level = p
                        .levels
                        .iter()
                        .map(|l| l.iter().filter(|x| x.part != PartKind::Whole).count())
                        .max()
                        .unwrap_or(0);
                    if p.splits + 1 > p.level_count() || per_level > 2 {
                        failures.push(format!(
                            "case {case} {order}: {} splits, {} levels, {per_level} split parts in one level",
                            p.splits,
                            p.level_count()
                        ));
                    }
                }
                Err(e) => failures.push(format!("case {case} {order}: {e}")),
            }
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{} of 400 placements failed, up to {max_splits} splits and {max_levels} levels{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!(", first: {f}"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

const KKT_TOL: f64 = 1e-9;

fn kkt_violation(p: &ClampedBudgetProblem, s: &WaterfillSolution) -> Option<String> {
    let close = |a: f64, b: f64| (a - b).abs() <= KKT_TOL * a.abs().max(b.abs()).max(1.0);
    let mut all_upper = true;
    for i in 0..p.len() {
        let (w, l, h, r) = (p.weights[i], p.lower[i], p.upper[i], s.rates[i]);
        let target = w.sqrt() * s.level;
        let ok = match s.states[i] {
            ClampState::AtLower => close(r, l) && (w == 0.0 || target <= l + KKT_TOL * l.max(1.0)),
            ClampState::AtUpper => close(r, h) && target >= h - KKT_TOL * h.max(1.0),
            ClampState::Interior => close(r, target) && r >= l - KKT_TOL && r <= h + KKT_TOL,
        };
        if !ok {
            return Some(format!(
                "entry {i}: state {:?}, r={r}, l={l}, h={h}, sqrt(w)R={target}",
                s.states[i]
            ));
        }
        if w > 0.0 && s.states[i] != ClampState::AtUpper {
            all_upper = false;
        }
    }
    let total: f64 = s.rates.iter().zip(&p.lower).map(|(r, l)| r - l).sum();
    if total > p.budget + KKT_TOL * p.budget.max(1.0) {
        return Some(format!("allocation {total} exceeds budget {}", p.budget));
    }
    if !close(total, p.budget) && !all_upper {
        return Some(format!(
            "budget {} slack at {total} with an unclamped peer",
            p.budget
        ));
    }
    None
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut wrong_case = Vec::new();
    let mut check = |label: String, p: &ClampedBudgetProblem, s: &WaterfillSolution| {
        checked += 1;
        if let Some(v) = kkt_violation(p, s) {
            failures.push(format!("{label}: {v}"));
        }
    };
    for case in 0..300 {
        let p = random_problem(&mut rng, 30, true);
        let s = solve_clamped_waterfill(&p).expect("valid problem");
        check(format!("problem {case}"), &p, &s);
    }
    for case in 0..100 {
        let inst = random_instance(&mut rng, 60);
        let d: Vec<f64> = inst.peers.iter().map(|p| p.d).collect();
        let u: Vec<f64> = inst.peers.iter().map(|p| p.u).collect();
        let w: Vec<f64> = inst.peers.iter().map(|p| p.w).collect();
        let (lb, _) = lower_bound(&inst).expect("lower bound");
        check(
            format!("lower bound {case}"),
            &ClampedBudgetProblem::new(w.clone(), u.clone(), d.clone(), inst.server_bw),
            &lb,
        );
        let (ub, _) = upper_bound(&inst).expect("upper bound");
        check(
            format!("upper bound {case}"),
            &ClampedBudgetProblem::new(
                w.clone(),
                u.clone(),
                d.clone(),
                inst.server_bw - inst.max_upload(),
            ),
            &ub,
        );
        let s_prev = rng.random_range(0.0..2.0) * inst.total_upload();
        let level = solve_level(&inst.peers, s_prev).expect("level");
        let supplied = s_prev >= inst.total_upload();
        if supplied != (level.case == LevelCase::Supplied) {
            wrong_case.push(format!(
                "level {case}: case {:?} with S = {s_prev}",
                level.case
            ));
        }
        let problem = if supplied {
            ClampedBudgetProblem::new(w, u, d, s_prev - inst.total_upload())
        } else {
            ClampedBudgetProblem::new(w, vec![0.0; inst.len()], u, s_prev)
        };
        check(
            format!("level {case} ({:?})", level.case),
            &problem,
            &level.solution,
        );
    }
    failures.extend(wrong_case);
    Outcome::new(
        failures.is_empty(),
        format!(
            "{} of {checked} solutions violate the clamp conditions at 1e-9{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!(", first: {f}"))
                .unwrap_or_default()
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn run_cli(out: &Path, sequential: bool) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_p2p-wadt"));
    cmd.args([
        "experiment",
        "--peers",
        "20",
        "--server-bw",
        "5",
        "--trials",
        "24",
        "--seed",
        "42",
        "--levels",
        "4",
        "--format",
        "csv",
        "--out",
    ])
    .arg(out);
    if sequential {
        cmd.arg("--sequential");
    }
    cmd.output().expect("spawn CLI")
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("read output dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            let name = p
                .file_name()
                .expect("file name")
                .to_string_lossy()
                .into_owned();
            (name, std::fs::read(&p).expect("read csv"))
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let runs = [("a", false), ("b", false), ("c", true)];
    let mut outputs = Vec::new();
    for (name, sequential) in runs {
        let dir = tmp.path().join(name);
        let out = run_cli(&dir, sequential);
        if !out.status.success() {
            return Outcome::new(
                false,
                format!(
                    "run {name} exited with {}: {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr)
                ),
            );
        }
        outputs.push(csv_files(&dir));
    }
    let count = outputs[0].len();
    let parallel_same = outputs[0] == outputs[1];
    let sequential_same = outputs[0] == outputs[2];
    Outcome::new(
        count > 0 && parallel_same && sequential_same,
        format!(
            "{count} CSV files, parallel rerun identical: {parallel_same}, sequential run identical: {sequential_same}"
        ),
    )
}

// ---------------------------------------------------------------------- main

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "water-fill vs grid oracle", criterion_1),
    (2, "bound sandwich for the convex program", criterion_2),
    (3, "small-network reference means", criterion_3),
    (4, "Method 1 spot check", criterion_4),
    (5, "large-network reference means", criterion_5),
    (6, "sub-peer decomposition equivalence", criterion_6),
    (7, "acyclic iff hierarchical", criterion_7),
    (8, "placement split bound", criterion_8),
    (9, "clamp-state KKT conditions", criterion_9),
    (10, "deterministic experiment output", criterion_10),
];

fn main() {
    if std::env::args().any(|a| a == "--list") {
        for (id, _, _) in CRITERIA {
            println!("criterion_{id}: test");
        }
        return;
    }
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<usize> = args
        .iter()
        .filter_map(|a| a.trim_start_matches("criterion_").parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} [{name}] {} ({:.1} s)",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
