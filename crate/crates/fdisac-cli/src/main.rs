//! Command-line driver: scenario validation, single runs, convergence
//! traces, Monte Carlo sweeps, and paired scheme comparisons. All data goes
//! to files under `--out`; stdout carries one-line summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fdisac::channel::sample_paths;
use fdisac::config::{PenaltyMode, RunConfig, Scheme};
use fdisac::error::Error;
use fdisac::harness::{
    self, emit_results, run_convergence, run_sweep, OutputFormat, RealizationGeometry,
    RunManifest,
};

#[derive(Parser)]
#[command(
    name = "fdisac",
    about = "Full-duplex ISAC simulator with movable antennas",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration document ([scenario], [gml], [sweep], [solver]).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; every file this tool writes lands under it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override (falls back to the SEED_OVERRIDE environment
    /// variable, then to the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Penalty mode override: soft_hinge | paper_indicator.
    #[arg(long)]
    penalty_mode: Option<String>,
    /// Output format for result files: csv | json.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Worker threads for Monte Carlo realizations (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one channel realization with one scheme.
    Run {
        #[command(flatten)]
        common: Common,
        /// Scheme: ma | nlp | ma_fd_only | fpa_both.
        #[arg(long, default_value = "ma")]
        scheme: String,
    },
    /// Single meta-learning run; exports the per-epoch trace.
    Converge {
        #[command(flatten)]
        common: Common,
    },
    /// Run the sweep configured in [sweep].
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Override the realizations per sweep point.
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Paired comparison of schemes over a batch of seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Schemes to compare (repeatable); default: ma, nlp.
        #[arg(long = "scheme")]
        schemes: Vec<String>,
        /// Number of paired seeds.
        #[arg(long, default_value_t = 20)]
        realizations: usize,
    },
    /// Check a config document and print the effective (default-filled)
    /// config. Without --config, validates the built-in defaults.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InfeasibleLayout(_) => 2,
                Error::NumericFault { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn effective_seed(cli_seed: Option<u64>, config_seed: u64) -> u64 {
    if let Some(s) = cli_seed {
        return s;
    }
    if let Ok(v) = std::env::var("SEED_OVERRIDE") {
        if let Ok(s) = v.parse() {
            return s;
        }
    }
    config_seed
}

fn setup_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // Ignore failure: the global pool can only be initialized once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(path: &Path, penalty_mode: &Option<String>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(mode) = penalty_mode {
        cfg.gml.penalty_mode = PenaltyMode::from_str(mode)?;
    }
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn single_run_manifest(cfg: &RunConfig, seed: u64) -> Result<RunManifest, Error> {
    let real = sample_paths(&cfg.scenario, seed)?;
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario_hash: cfg.scenario.content_hash(),
        penalty_mode: cfg.gml.penalty_mode.to_string(),
        base_seed: seed,
        realization_seeds: vec![seed],
        geometry: vec![RealizationGeometry::of_realization(&real)],
    })
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            cfg.validate()?;
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
        Command::Run { common, scheme } => {
            setup_workers(common.workers);
            let cfg = load_config(&common.config, &common.penalty_mode)?;
            let scheme = Scheme::from_str(&scheme)?;
            let seed = effective_seed(common.seed, cfg.gml.seed);
            let real = sample_paths(&cfg.scenario, seed)?;
            let solution = fdisac::baselines::solve_scheme(
                scheme,
                &cfg.scenario,
                &real,
                &cfg.gml,
                &cfg.solver,
                seed,
            )?;
            let doc = serde_json::to_string_pretty(&solution).expect("solution serializes");
            write_out(&common.out, "solution.json", &doc)?;
            let manifest = single_run_manifest(&cfg, seed)?;
            write_out(
                &common.out,
                "manifest.json",
                &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            println!(
                "run scheme={} seed={} lambda_t={:.6} feasible={}",
                scheme.id(),
                seed,
                solution.lambda_t,
                solution.feasible
            );
            Ok(())
        }
        Command::Converge { common } => {
            setup_workers(common.workers);
            let cfg = load_config(&common.config, &common.penalty_mode)?;
            let seed = effective_seed(common.seed, cfg.gml.seed);
            let (solution, trace) = run_convergence(&cfg.scenario, &cfg.gml, seed)?;
            write_out(&common.out, "trace.csv", &trace.to_csv())?;
            let manifest = single_run_manifest(&cfg, seed)?;
            write_out(
                &common.out,
                "manifest.json",
                &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            println!(
                "converge seed={} epochs={} best_lambda_t={:.6} feasible={}",
                seed,
                trace.epochs.len(),
                solution.lambda_t,
                solution.feasible
            );
            Ok(())
        }
        Command::Sweep {
            common,
            realizations,
        } => {
            setup_workers(common.workers);
            let cfg = load_config(&common.config, &common.penalty_mode)?;
            let mut spec = cfg.sweep.clone();
            if let Some(r) = realizations {
                spec.realizations = r;
            }
            spec.base_seed = effective_seed(common.seed, spec.base_seed);
            let format = OutputFormat::from_str(&common.format)?;
            let result = run_sweep(&spec, &cfg.scenario, &cfg.gml, &cfg.solver)?;
            emit_results(&result, format, &common.out)?;
            for point in &result.aggregate {
                let grid = point
                    .sweep_value_u
                    .map(|u| format!(" r_th_u={u}"))
                    .unwrap_or_default();
                println!(
                    "sweep scheme={} {}={}{} mean_lambda_t={:.6} stderr={:.6} feasibility={:.3}",
                    point.scheme.id(),
                    point.sweep_param,
                    point.sweep_value,
                    grid,
                    point.mean_lambda_t,
                    point.stderr_lambda_t,
                    point.feasibility_rate
                );
            }
            Ok(())
        }
        Command::Compare {
            common,
            schemes,
            realizations,
        } => {
            setup_workers(common.workers);
            let cfg = load_config(&common.config, &common.penalty_mode)?;
            let schemes: Vec<Scheme> = if schemes.is_empty() {
                vec![Scheme::Ma, Scheme::Nlp]
            } else {
                schemes
                    .iter()
                    .map(|s| Scheme::from_str(s))
                    .collect::<Result<_, _>>()?
            };
            let base_seed = effective_seed(common.seed, cfg.sweep.base_seed);
            let result = compare_schemes(&cfg, &schemes, realizations, base_seed)?;
            let format = OutputFormat::from_str(&common.format)?;
            match format {
                OutputFormat::Csv => {
                    write_out(
                        &common.out,
                        "compare_raw.csv",
                        &harness::raw_records_to_csv(&result.records),
                    )?;
                }
                OutputFormat::Json => {
                    write_out(
                        &common.out,
                        "compare_raw.json",
                        &serde_json::to_string_pretty(&result.records).expect("serializes"),
                    )?;
                }
            }
            write_out(
                &common.out,
                "compare_summary.json",
                &serde_json::to_string_pretty(&result.summary).expect("serializes"),
            )?;
            for line in &result.lines {
                println!("{line}");
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PairSummary {
    scheme: String,
    reference: String,
    feasible_pairs: usize,
    total_pairs: usize,
    mean_ratio: f64,
}

struct CompareOutcome {
    records: Vec<harness::RawRecord>,
    summary: Vec<PairSummary>,
    lines: Vec<String>,
}

/// Paired evaluation of several schemes over `realizations` seeds: every
/// scheme sees the same channel realization at each index. When the
/// classical solver is among the schemes it serves as the ratio reference.
fn compare_schemes(
    cfg: &RunConfig,
    schemes: &[Scheme],
    realizations: usize,
    base_seed: u64,
) -> Result<CompareOutcome, Error> {
    use rayon::prelude::*;
    let rows: Vec<Result<Vec<harness::RawRecord>, Error>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r as u64;
            let real = sample_paths(&cfg.scenario, seed)?;
            let mut recs = Vec::new();
            for &scheme in schemes {
                let t0 = std::time::Instant::now();
                let sol = fdisac::baselines::solve_scheme(
                    scheme,
                    &cfg.scenario,
                    &real,
                    &cfg.gml,
                    &cfg.solver,
                    seed,
                )?;
                recs.push(harness::RawRecord {
                    scheme,
                    sweep_param: "compare".to_string(),
                    sweep_value: 0.0,
                    sweep_value_u: None,
                    realization: r,
                    seed,
                    lambda_t: sol.lambda_t,
                    feasible: sol.feasible,
                    runtime_s: t0.elapsed().as_secs_f64(),
                });
            }
            Ok(recs)
        })
        .collect();

    let mut records = Vec::new();
    for row in rows {
        records.extend(row?);
    }

    let reference = if schemes.contains(&Scheme::Nlp) {
        Scheme::Nlp
    } else {
        schemes[0]
    };
    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for &scheme in schemes {
        if scheme == reference {
            continue;
        }
        let mut ratios = Vec::new();
        let mut total = 0usize;
        for r in 0..realizations {
            let a = records
                .iter()
                .find(|x| x.realization == r && x.scheme == scheme);
            let b = records
                .iter()
                .find(|x| x.realization == r && x.scheme == reference);
            if let (Some(a), Some(b)) = (a, b) {
                total += 1;
                if a.feasible && b.feasible {
                    ratios.push(a.lambda_t / b.lambda_t);
                }
            }
        }
        let mean_ratio = if ratios.is_empty() {
            f64::NAN
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        };
        lines.push(format!(
            "compare {} vs {}: mean_ratio={:.4} feasible_pairs={}/{}",
            scheme.id(),
            reference.id(),
            mean_ratio,
            ratios.len(),
            total
        ));
        summary.push(PairSummary {
            scheme: scheme.id().to_string(),
            reference: reference.id().to_string(),
            feasible_pairs: ratios.len(),
            total_pairs: total,
            mean_ratio,
        });
    }
    Ok(CompareOutcome {
        records,
        summary,
        lines,
    })
}
