use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use p2p_wadt::convex::{solve_program, SolverOptions};
use p2p_wadt::decompose::{
    decompose, verify_equivalence, DecomposeOptions, DEFAULT_ENUMERATION_CAP,
};
use p2p_wadt::harness::{self, emit_report, parse_methods, ExperimentConfig, ReportFormat};
use p2p_wadt::model::{
    classify, compute_levels, metrics, trivial_allocations, validate_flow_graph, FlowGraph,
    LevelAssignment, NetworkInstance, RateAllocation,
};
use p2p_wadt::placement::{method5_pipeline, place_peers, PlacementOrder};
use p2p_wadt::waterfill::{evaluate_level_assignment, lower_bound, upper_bound};
use p2p_wadt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "p2p-wadt",
    version,
    about = "Minimum-WADT planning for static peer-to-peer networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random instance.
    Gen {
        #[arg(long, default_value_t = 100)]
        peers: usize,
        #[arg(long, default_value_t = 10.0)]
        server_bw: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Trial index; selects an independent stream of the seed.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a rate allocation.
    Solve {
        #[arg(long, value_enum)]
        method: SolveMethod,
        #[arg(long)]
        instance: PathBuf,
        /// Level assignment for `--method levels`.
        #[arg(long)]
        assignment: Option<PathBuf>,
        /// Level count for `--method convex`; defaults to min(N, 30).
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Placement order for `--method method5`.
        #[arg(long, default_value = "desc-rate")]
        order: PlacementOrder,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a flow graph and report its levels.
    Classify {
        #[arg(long)]
        input: PathBuf,
        /// Also check bandwidth constraints against this instance.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a flow graph into an equivalent network of sub-peers.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        full_division: bool,
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
        enumeration_cap: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Place peers into levels given their rates.
    Place {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        rates: PathBuf,
        #[arg(long, default_value = "desc-rate")]
        order: PlacementOrder,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded Monte-Carlo comparison of methods 1 to 7.
    Experiment {
        #[arg(long, default_value_t = 100)]
        peers: usize,
        #[arg(long, default_value_t = 10.0)]
        server_bw: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "1,2,3,4,5,6,7")]
        methods: String,
        /// Level count for methods 1 and 4; defaults to min(N, 30).
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Run trials one after another.
        #[arg(long)]
        sequential: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Upper,
    Lower,
    Levels,
    Method5,
    Convex,
    Upload,
    Download,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Rates file: either a bare array or any object with a `rates` array,
/// such as the output of `solve`.
#[derive(Deserialize)]
#[serde(untagged)]
enum RatesFile {
    Bare(Vec<f64>),
    Wrapped { rates: Vec<f64> },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn default_levels(inst: &NetworkInstance) -> usize {
    inst.len().clamp(1, 30)
}

fn allocation_report(method: &str, inst: &NetworkInstance, rates: Vec<f64>, extra: Value) -> Value {
    let alloc = RateAllocation(rates);
    let m = metrics(&alloc, inst);
    let mut v = json!({
        "method": method,
        "rates": alloc.0,
        "wadt": p2p_wadt::serde_f64::to_value(m.wadt),
        "bandwidth_usage": m.bandwidth_usage,
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut v, extra) {
        base.extend(more);
    }
    v
}

fn solve(
    method: SolveMethod,
    inst: &NetworkInstance,
    assignment: Option<&Path>,
    levels: Option<usize>,
    opts: SolverOptions,
    order: PlacementOrder,
) -> Result<Value> {
    let water = |w: f64| p2p_wadt::serde_f64::to_value(w);
    Ok(match method {
        SolveMethod::Upper | SolveMethod::Lower => {
            let upper = matches!(method, SolveMethod::Upper);
            let (sol, _) = if upper {
                upper_bound(inst)?
            } else {
                lower_bound(inst)?
            };
            let budget = if upper {
                inst.server_bw - inst.max_upload()
            } else {
                inst.server_bw
            };
            let name = if upper { "upper" } else { "lower" };
            allocation_report(
                name,
                inst,
                sol.rates.clone(),
                json!({ "water_levels": [water(sol.level)], "server_bw": [budget] }),
            )
        }
        SolveMethod::Levels => {
            let path = assignment
                .ok_or_else(|| Error::Validation("--method levels needs --assignment".into()))?;
            let la: LevelAssignment = read_json(path)?;
            let ev = evaluate_level_assignment(inst, &la)?;
            let waters: Vec<Value> = ev.water_levels.iter().map(|&w| water(w)).collect();
            allocation_report(
                "levels",
                inst,
                ev.rates.0.clone(),
                json!({ "water_levels": waters, "server_bw": ev.server_bw, "cases": ev.cases }),
            )
        }
        SolveMethod::Method5 => {
            let res = method5_pipeline(inst, order)?;
            let waters: Vec<Value> = res
                .evaluation
                .water_levels
                .iter()
                .map(|&w| water(w))
                .collect();
            allocation_report(
                "method5",
                inst,
                res.evaluation.rates.0.clone(),
                json!({
                    "water_levels": waters,
                    "server_bw": res.evaluation.server_bw,
                    "assignment": res.assignment,
                    "placement": res.placement,
                }),
            )
        }
        SolveMethod::Convex => {
            let k = levels.unwrap_or_else(|| default_levels(inst));
            let sol = solve_program(inst, k, &opts)?;
            if let Some(w) = &sol.warning {
                eprintln!("warning: {w}");
            }
            let mut v = serde_json::to_value(&sol)?;
            v["rates_per_level"] = v["rates"].take();
            v["rates"] = json!(sol.peer_rates);
            v["bandwidth_usage"] =
                json!(sol.peer_rates.iter().sum::<f64>() / inst.total_download());
            v["method"] = json!("convex");
            v
        }
        SolveMethod::Upload => {
            allocation_report("upload", inst, trivial_allocations(inst).0 .0, json!({}))
        }
        SolveMethod::Download => {
            allocation_report("download", inst, trivial_allocations(inst).1 .0, json!({}))
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            peers,
            server_bw,
            alpha,
            beta,
            seed,
            trial,
            out,
        } => {
            let cfg = ExperimentConfig {
                peers,
                server_bw,
                alpha,
                beta,
                seed,
                ..ExperimentConfig::default()
            };
            write_json(&harness::generate_instance(&cfg, trial)?, out.as_deref())
        }
        Command::Solve {
            method,
            instance,
            assignment,
            levels,
            max_iter,
            tol,
            order,
            out,
        } => {
            let inst: NetworkInstance = read_json(&instance)?;
            let defaults = SolverOptions::default();
            let opts = SolverOptions {
                max_iter: max_iter.unwrap_or(defaults.max_iter),
                tol: tol.unwrap_or(defaults.tol),
                ..defaults
            };
            let report = solve(method, &inst, assignment.as_deref(), levels, opts, order)?;
            write_json(&report, out.as_deref())
        }
        Command::Classify {
            input,
            instance,
            out,
        } => {
            let g: FlowGraph = read_json(&input)?;
            let class = classify(&g);
            let levels = compute_levels(&g).ok();
            let mut report = json!({
                "class": class.to_string(),
                "acyclic": g.is_acyclic(),
                "levels": levels.as_ref().map(|l| l.as_slice().to_vec()),
                "max_level": levels.as_ref().map(|l| l.max_level()),
            });
            if let Some(path) = instance {
                let inst: NetworkInstance = read_json(&path)?;
                report["violations"] = serde_json::to_value(validate_flow_graph(&g, &inst)?)?;
            }
            write_json(&report, out.as_deref())
        }
        Command::Decompose {
            input,
            instance,
            full_division,
            enumeration_cap,
            out,
        } => {
            let g: FlowGraph = read_json(&input)?;
            let inst: NetworkInstance = read_json(&instance)?;
            let opts = DecomposeOptions {
                full_division,
                enumeration_cap,
            };
            let sp = decompose(&g, &inst, opts)?;
            if !verify_equivalence(&g, &sp) {
                return Err(Error::InfeasibleConstruction(
                    "decomposition does not reproduce the input rates".into(),
                ));
            }
            write_json(&sp, out.as_deref())
        }
        Command::Place {
            instance,
            rates,
            order,
            out,
        } => {
            let inst: NetworkInstance = read_json(&instance)?;
            let rates = match read_json::<RatesFile>(&rates)? {
                RatesFile::Bare(r) | RatesFile::Wrapped { rates: r } => RateAllocation(r),
            };
            write_json(&place_peers(&inst, &rates, order)?, out.as_deref())
        }
        Command::Experiment {
            peers,
            server_bw,
            alpha,
            beta,
            trials,
            seed,
            methods,
            levels,
            bins,
            out,
            format,
            sequential,
        } => {
            let cfg = ExperimentConfig {
                peers,
                server_bw,
                alpha,
                beta,
                trials,
                seed,
                methods: parse_methods(&methods)?,
                levels: levels.unwrap_or_else(|| peers.clamp(1, 30)),
                histogram_bins: bins,
            };
            let summary = if sequential {
                harness::run_experiment_sequential(&cfg)?
            } else {
                harness::run_experiment(&cfg)?
            };
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            let files = emit_report(&summary, &out, format)?;
            println!("method,wadt,nwadt,bu");
            for s in &summary.methods {
                let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                println!(
                    "{},{},{},{}",
                    s.method,
                    cell(s.mean_wadt),
                    cell(s.normalized_wadt),
                    cell(s.mean_bandwidth_usage)
                );
            }
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
